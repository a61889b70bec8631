#include "gdnv/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace gdnv {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  bool done() const { return pos_ == bytes_.size(); }

  std::uint64_t uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(width);
    return v;
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw DataError("checkpoint: truncated record");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void Container::upsert(Record r) {
  for (auto& existing : records_) {
    if (existing.name == r.name) {
      existing = std::move(r);
      return;
    }
  }
  records_.push_back(std::move(r));
}

void Container::put(std::string name, const Tensor<float>& t) {
  const Shape& s = t.shape();
  put(std::move(name), {s.n, s.c, s.h, s.w}, t.values());
}

void Container::put(std::string name, std::vector<std::uint64_t> dims, std::vector<float> values) {
  std::uint64_t count = 1;
  for (auto d : dims) count *= d;
  if (count != values.size()) throw ShapeError("checkpoint: record '" + name + "' dims do not match value count");
  Record r;
  r.name = std::move(name);
  r.dims = std::move(dims);
  r.values = std::move(values);
  upsert(std::move(r));
}

void Container::put_text(std::string name, std::string text) {
  Record r;
  r.name = std::move(name);
  r.dtype = DType::Utf8;
  r.dims = {text.size()};
  r.text = std::move(text);
  upsert(std::move(r));
}

const Record* Container::find(std::string_view name) const {
  for (const auto& r : records_) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

Tensor<float> Container::tensor(std::string_view name) const {
  const Record* r = find(name);
  if (!r) throw DataError("checkpoint: missing record '" + std::string(name) + "'");
  if (r->dtype != DType::Float32) throw DataError("checkpoint: record '" + r->name + "' is not numeric");
  if (r->dims.size() > 4) throw DataError("checkpoint: record '" + r->name + "' has rank > 4");
  std::uint64_t d[4] = {1, 1, 1, 1};
  const std::size_t off = 4 - r->dims.size();
  for (std::size_t i = 0; i < r->dims.size(); ++i) d[off + i] = r->dims[i];
  return Tensor<float>(Shape{d[0], d[1], d[2], d[3]}, r->values);
}

const std::string& Container::text(std::string_view name) const {
  const Record* r = find(name);
  if (!r || r->dtype != DType::Utf8) throw DataError("checkpoint: missing text record '" + std::string(name) + "'");
  return r->text;
}

void Container::merge(const Container& other) {
  for (const auto& r : other.records_) upsert(r);
}

std::string Container::encode() const {
  std::string out = "GDNV";
  put_u32(out, kContainerVersion);
  for (const auto& r : records_) {
    put_u32(out, static_cast<std::uint32_t>(r.name.size()));
    out += r.name;
    put_u32(out, static_cast<std::uint32_t>(r.dims.size()));
    for (auto d : r.dims) put_u64(out, d);
    out.push_back(static_cast<char>(r.dtype));
    if (r.dtype == DType::Float32) {
      for (float v : r.values) put_u32(out, std::bit_cast<std::uint32_t>(v));
    } else {
      out += r.text;
    }
  }
  return out;
}

Container Container::decode(std::string_view bytes) {
  Reader in(bytes);
  if (in.take(4) != "GDNV") throw DataError("checkpoint: bad magic");
  const auto version = in.uint(4);
  if (version != kContainerVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
  Container c;
  while (!in.done()) {
    Record r;
    r.name = std::string(in.take(in.uint(4)));
    const auto rank = in.uint(4);
    std::uint64_t count = 1;
    for (std::uint64_t i = 0; i < rank; ++i) {
      r.dims.push_back(in.uint(8));
      count *= r.dims.back();
    }
    const auto tag = in.uint(1);
    if (tag == static_cast<std::uint64_t>(DType::Float32)) {
      r.values.resize(count);
      for (auto& v : r.values) v = std::bit_cast<float>(static_cast<std::uint32_t>(in.uint(4)));
    } else if (tag == static_cast<std::uint64_t>(DType::Utf8)) {
      r.dtype = DType::Utf8;
      r.text = std::string(in.take(count));
    } else {
      throw DataError("checkpoint: unknown dtype tag " + std::to_string(tag));
    }
    c.upsert(std::move(r));
  }
  return c;
}

void Container::save(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  const std::string bytes = encode();
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("write failed for " + path.string());
}

Container Container::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode(ss.str());
}

}  // namespace gdnv
