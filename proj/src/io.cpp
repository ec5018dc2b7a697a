#include "ctm/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ctm {

namespace {

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(std::string data, std::string path) : data_(std::move(data)), path_(std::move(path)) {}

  const char* take(std::size_t n) {
    if (n > data_.size() - pos_) throw std::runtime_error(path_ + ": truncated file");
    const char* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint64_t u64() {
    const auto* p = reinterpret_cast<const unsigned char*>(take(8));
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
  }
  std::uint32_t u32() {
    const auto* p = reinterpret_cast<const unsigned char*>(take(4));
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
    return v;
  }
  std::string str() {
    const std::uint64_t n = u64();
    return std::string(take(n), n);
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::string data_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

const Tensor& TensorFile::get(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.value;
  }
  throw std::runtime_error("tensor '" + name + "' not found in file");
}

void write_tensor_file(const std::filesystem::path& path, const std::string& magic,
                       const nlohmann::json& header, const std::vector<NamedTensor>& tensors) {
  if (magic.size() != 8) throw std::invalid_argument("tensor file magic must be 8 bytes");
  std::string out = magic;
  put_u32(out, kTensorFileVersion);
  const std::string h = header.dump();
  put_u64(out, h.size());
  out += h;
  put_u64(out, tensors.size());
  for (const auto& t : tensors) {
    put_u64(out, t.name.size());
    out += t.name;
    put_u64(out, t.value.rank());
    for (auto d : t.value.shape) put_u64(out, d);
    for (double v : t.value.data) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  write_text_file(path, out);
}

TensorFile read_tensor_file(const std::filesystem::path& path, const std::string& magic) {
  Reader r(read_text_file(path), path.string());
  if (std::string(r.take(8), 8) != magic) {
    throw std::runtime_error(path.string() + ": not a " + magic + " file (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kTensorFileVersion) {
    throw std::runtime_error(path.string() + ": unsupported version " + std::to_string(version));
  }
  TensorFile f;
  f.header = nlohmann::json::parse(r.str());
  const std::uint64_t count = r.u64();
  for (std::uint64_t k = 0; k < count; ++k) {
    NamedTensor t;
    t.name = r.str();
    Shape shape(r.u64());
    for (auto& d : shape) d = r.u64();
    Tensor value(shape);
    for (auto& v : value.data) v = std::bit_cast<double>(r.u64());
    t.value = std::move(value);
    f.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw std::runtime_error(path.string() + ": trailing bytes");
  return f;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!os) throw std::runtime_error("write failed for " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace ctm
