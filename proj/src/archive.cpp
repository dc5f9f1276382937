#include "fgreid/archive.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_set>

namespace fgreid::inline FGREID_PRECISION {

namespace {

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw CorruptionError(std::string("archive truncated while reading ") + what + " at byte " + std::to_string(pos_));
    }
  }

  std::uint8_t u8(const char* what) {
    need(1, what);
    return bytes_[pos_++];
  }

  std::uint16_t u16(const char* what) {
    need(2, what);
    const std::uint16_t v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_archive(const TensorList& tensors) {
  std::unordered_set<std::string> names;
  std::vector<std::uint8_t> out(std::begin(kArchiveMagic), std::end(kArchiveMagic));
  put_u16(out, kArchiveVersion);
  if (tensors.size() > UINT32_MAX) throw std::length_error("too many tensors for one archive");
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const NamedTensor& nt : tensors) {
    if (!names.insert(nt.name).second) throw std::invalid_argument("duplicate tensor name '" + nt.name + "'");
    if (nt.name.size() > UINT32_MAX) throw std::length_error("tensor name too long");
    if (nt.tensor.rank() > UINT8_MAX) throw std::length_error("tensor rank too large for the archive");
    if (!nt.tensor.all_finite()) throw std::domain_error("tensor '" + nt.name + "' contains non-finite values");
    put_u32(out, static_cast<std::uint32_t>(nt.name.size()));
    out.insert(out.end(), nt.name.begin(), nt.name.end());
    put_u8(out, static_cast<std::uint8_t>(nt.tensor.rank()));
    for (std::size_t d : nt.tensor.shape()) {
      if (d > UINT32_MAX) throw std::length_error("tensor dimension too large for the archive");
      put_u32(out, static_cast<std::uint32_t>(d));
    }
    for (Real v : nt.tensor.data()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

TensorList decode_archive(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kArchiveMagic, 4) != 0) {
    throw FormatError("not an FGRD archive (bad magic)");
  }
  Reader in(bytes.subspan(4));
  const std::uint16_t version = in.u16("version");
  if (version == 0) throw FormatError("archive version 0 is invalid");
  if (version > kArchiveVersion) {
    throw UnsupportedVersionError("archive version " + std::to_string(version) + " is newer than supported version " +
                                  std::to_string(kArchiveVersion));
  }
  const std::uint32_t count = in.u32("tensor count");
  // Smallest possible record: empty name length + rank byte.
  if (count > in.remaining() / 5) throw CorruptionError("tensor count " + std::to_string(count) + " exceeds archive size");

  TensorList out;
  out.reserve(count);
  std::unordered_set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = in.u32("name length");
    auto name_bytes = in.take(name_len, "tensor name");
    std::string name(name_bytes.begin(), name_bytes.end());
    if (!names.insert(name).second) throw FormatError("duplicate tensor name '" + name + "'");
    const std::uint8_t rank = in.u8("rank");
    Shape shape(rank);
    std::uint64_t elements = 1;
    for (std::uint8_t r = 0; r < rank; ++r) {
      shape[r] = in.u32("dims");
      elements *= shape[r];
      if (elements > in.remaining() / 4 + 1) {
        throw CorruptionError("tensor '" + name + "' declares more elements than the archive holds");
      }
    }
    if (elements * 4 > in.remaining()) {
      throw CorruptionError("tensor '" + name + "' payload of " + std::to_string(elements * 4) + " bytes exceeds the " +
                            std::to_string(in.remaining()) + " bytes left");
    }
    auto payload = in.take(static_cast<std::size_t>(elements) * 4, "payload");
    std::vector<Real> data(static_cast<std::size_t>(elements));
    for (std::size_t k = 0; k < data.size(); ++k) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(payload[k * 4 + static_cast<std::size_t>(b)]) << (8 * b);
      const float v = std::bit_cast<float>(bits);
      if (!std::isfinite(v)) throw CorruptionError("tensor '" + name + "' holds a non-finite value");
      data[k] = static_cast<Real>(v);
    }
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  if (in.remaining() != 0) throw CorruptionError(std::to_string(in.remaining()) + " trailing bytes after the last tensor");
  return out;
}

void write_archive(const TensorList& tensors, const std::filesystem::path& path) {
  const auto bytes = encode_archive(tensors);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

TensorList read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_archive(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const UnsupportedVersionError& e) {
    throw UnsupportedVersionError(path.string() + ": " + e.what());
  } catch (const CorruptionError& e) {
    throw CorruptionError(path.string() + ": " + e.what());
  }
}

const Tensor& find_tensor(const TensorList& tensors, const std::string& name) {
  for (const NamedTensor& nt : tensors) {
    if (nt.name == name) return nt.tensor;
  }
  throw std::out_of_range("archive has no tensor named '" + name + "'");
}

}  // namespace fgreid::inline FGREID_PRECISION
