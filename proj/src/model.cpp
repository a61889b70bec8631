#include "gdnv/model.hpp"

namespace gdnv {

template <typename T>
PlaceModel<T>::PlaceModel(const GhostCNNConfig& cfg, std::size_t clusters) : backbone(cfg) {
  vlad = NetVladLayer<T>(VladParams<T>(clusters, backbone.output_channels()));
}

template <typename T>
void PlaceModel<T>::init(Rng& rng) {
  backbone.init(rng);
}

template <typename T>
Tensor<T> PlaceModel<T>::forward(const Tensor<T>& images, Mode mode) {
  return vlad.forward(backbone.forward(images, mode), mode);
}

template <typename T>
Tensor<T> PlaceModel<T>::backward(const Tensor<T>& upstream) {
  return backbone.backward(vlad.backward(upstream));
}

template <typename T>
ParamList<T> PlaceModel<T>::parameters() {
  ParamList<T> out;
  backbone.collect(out);
  vlad.collect(out);
  return out;
}

template <typename T>
std::vector<T> PlaceModel<T>::global_descriptor(const Tensor<T>& image) {
  if (image.shape().n != 1) throw ShapeError("global_descriptor: expects one image");
  std::vector<T> v = forward(image, Mode::Infer).values();
  if (!pca) return v;
  std::vector<double> d(v.begin(), v.end());
  auto r = pca->apply(std::span<const double>(d));
  return {r.begin(), r.end()};
}

template <typename T>
std::size_t PlaceModel<T>::descriptor_dim() const {
  return pca ? pca->out_dim : vlad.output_dim();
}

template <typename T>
void PlaceModel<T>::set_bn_cumulative(bool on) {
  std::vector<BatchNormState<T>*> states;
  backbone.collect_bn(states);
  for (auto* s : states) {
    s->cumulative = on;
    s->batches_seen = 0;
  }
}

template <typename T>
Container PlaceModel<T>::to_container() {
  Container c;
  c.put_text("config.backbone", config_to_json(backbone.config()));
  c.put("vlad.alpha", {1}, {static_cast<float>(vlad.params.alpha)});
  for (const auto& p : parameters()) c.put(p.name, p.tensor->template cast<float>());
  if (pca) pca->save(c);
  return c;
}

template <typename T>
PlaceModel<T> PlaceModel<T>::from_container(const Container& c) {
  const GhostCNNConfig cfg = config_from_json(c.text("config.backbone"));
  const Tensor<float> centers = c.tensor("vlad.centers");
  PlaceModel<T> m(cfg, centers.shape().n);
  if (const Record* a = c.find("vlad.alpha"); a && !a->values.empty()) m.vlad.params.alpha = a->values[0];
  for (auto& p : m.parameters()) {
    Tensor<float> t = c.tensor(p.name);
    if (t.numel() != p.tensor->numel()) {
      throw DataError("checkpoint: record '" + p.name + "' has " + std::to_string(t.numel()) +
                      " values, model expects " + std::to_string(p.tensor->numel()));
    }
    *p.tensor = t.cast<T>().reshaped(p.tensor->shape());
  }
  if (c.contains("pca.proj")) m.pca = PcaWhitening::load(c);
  return m;
}

template class PlaceModel<float>;
template class PlaceModel<double>;

}  // namespace gdnv
