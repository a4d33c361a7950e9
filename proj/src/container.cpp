#include "dpa/container.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <fstream>
#include <iterator>
#include <memory>

#include "dpa/errors.hpp"

namespace dpa {

namespace {

constexpr std::string_view kMagic = "DPAC";

template <typename T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T le() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("DPAC: truncated input");
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const Tensor& TensorFile::get(std::string_view name) const {
  for (const auto& nt : tensors) {
    if (nt.name == name) return nt.tensor;
  }
  throw FormatError("DPAC: no tensor named '" + std::string(name) + "'");
}

std::string tensor_bytes(const Tensor& t) {
  std::string out;
  out.reserve(t.size() * 8);
  for (double v : t.data()) put_le(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

Tensor tensor_from_bytes(const Shape& shape, std::string_view bytes) {
  const std::size_t n = shape_size(shape);
  if (bytes.size() != n * 8) throw FormatError("tensor payload size does not match shape " + shape_str(shape));
  Reader r(bytes);
  std::vector<double> data(n);
  for (auto& v : data) v = std::bit_cast<double>(r.le<std::uint64_t>());
  return Tensor(shape, std::move(data));
}

std::string encode_dpac(const TensorFile& file) {
  std::string out(kMagic);
  put_le<std::uint16_t>(out, TensorFile::kVersion);
  out.push_back(file.tag);
  put_le<std::uint32_t>(out, file.epoch);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(file.tensors.size()));
  for (const auto& [name, t] : file.tensors) {
    if (name.size() > 0xffff) throw FormatError("DPAC: tensor name too long");
    if (t.rank() > 0xff) throw FormatError("DPAC: rank too large");
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(t.rank()));
    for (auto d : t.shape()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    out += tensor_bytes(t);
  }
  return out;
}

TensorFile decode_dpac(std::string_view bytes) {
  Reader r(bytes);
  if (r.take(4) != kMagic) throw FormatError("DPAC: bad magic");
  const auto version = r.le<std::uint16_t>();
  if (version != TensorFile::kVersion) throw FormatError("DPAC: unsupported version " + std::to_string(version));
  TensorFile file;
  file.tag = static_cast<char>(r.le<std::uint8_t>());
  file.epoch = r.le<std::uint32_t>();
  const auto count = r.le<std::uint32_t>();
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto name_len = r.le<std::uint16_t>();
    std::string name(r.take(name_len));
    const auto rank = r.le<std::uint8_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.le<std::uint32_t>();
    const std::size_t n = shape_size(shape);
    Tensor t = tensor_from_bytes(shape, r.take(n * 8));
    file.tensors.push_back({std::move(name), std::move(t)});
  }
  if (!r.done()) throw FormatError("DPAC: trailing bytes");
  return file;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + path.string());
}

void write_dpac(const std::filesystem::path& path, const TensorFile& file) { write_file(path, encode_dpac(file)); }

TensorFile read_dpac(const std::filesystem::path& path) { return decode_dpac(read_file(path)); }

std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), md.data(), &len) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 0xf]);
  }
  return out;
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

std::string base64_encode(std::string_view bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw FormatError("base64: length not a multiple of 4");
  std::string out(3 * text.size() / 4, '\0');
  const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
  if (n < 0) throw FormatError("base64: invalid input");
  // EVP_DecodeBlock keeps the padding bytes as zeros.
  std::size_t pad = 0;
  if (!text.empty() && text.back() == '=') ++pad;
  if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

}  // namespace dpa
