#include "fedseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace fedseg {

namespace {

constexpr char kMagic[5] = {'F', 'S', 'E', 'G', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

class Reader {
 public:
  Reader(std::istream& is, const std::string& path) : is_(is), path_(path) {}

  std::size_t offset() const { return offset_; }

  void bytes(void* dst, std::size_t n) {
    is_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) {
      throw std::runtime_error("checkpoint '" + path_ + "': truncated at byte offset " +
                               std::to_string(offset_));
    }
    offset_ += n;
  }

  std::uint32_t u32() {
    unsigned char b[4];
    bytes(b, 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }

  std::uint64_t u64() {
    unsigned char b[8];
    bytes(b, 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }

  double f64() { return std::bit_cast<double>(u64()); }

  bool at_eof() {
    is_.peek();
    return is_.eof();
  }

 private:
  std::istream& is_;
  std::string path_;
  std::size_t offset_ = 0;
};

bool name_is_statistic(const std::string& name) {
  auto ends_with = [&](const char* suffix) {
    const std::string s(suffix);
    return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
  };
  return ends_with(".running_mean") || ends_with(".running_var") || ends_with(".batches");
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamSet& params,
                     std::uint64_t config_digest) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) {
    throw std::runtime_error("checkpoint: cannot open '" + path.string() + "' for writing");
  }
  os.write(kMagic, sizeof(kMagic));
  put_u64(os, config_digest);
  put_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& e : params) {
    put_u32(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    os.put(static_cast<char>(e.tag));
    put_u32(os, static_cast<std::uint32_t>(e.value.rank()));
    for (std::size_t d : e.value.shape()) put_u64(os, d);
    for (double v : e.value.data()) put_f64(os, v);
  }
  if (!os) {
    throw std::runtime_error("checkpoint: write failed for '" + path.string() + "'");
  }
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw std::runtime_error("checkpoint: cannot open '" + path.string() + "'");
  }
  Reader r(is, path.string());

  char magic[5];
  r.bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("checkpoint '" + path.string() +
                             "': bad magic at byte offset 0");
  }

  LoadedCheckpoint result;
  result.config_digest = r.u64();
  const std::uint32_t count = r.u32();
  for (std::uint32_t ei = 0; ei < count; ++ei) {
    const std::uint32_t name_len = r.u32();
    if (name_len > 4096) {
      throw std::runtime_error("checkpoint '" + path.string() +
                               "': implausible name length at byte offset " +
                               std::to_string(r.offset() - 4));
    }
    std::string name(name_len, '\0');
    r.bytes(name.data(), name_len);

    unsigned char tag_byte = 0;
    r.bytes(&tag_byte, 1);
    if (tag_byte > 1) {
      throw std::runtime_error("checkpoint '" + path.string() +
                               "': bad tag byte at byte offset " +
                               std::to_string(r.offset() - 1));
    }
    const ParamTag tag = static_cast<ParamTag>(tag_byte);

    const std::uint32_t rank = r.u32();
    if (rank > 8) {
      throw std::runtime_error("checkpoint '" + path.string() +
                               "': implausible rank at byte offset " +
                               std::to_string(r.offset() - 4));
    }
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.u64());

    std::vector<double> data(Tensor::numel(shape));
    for (auto& v : data) v = r.f64();

    const bool trainable = tag == ParamTag::Rest || !name_is_statistic(name);
    result.params.add(std::move(name), tag, trainable,
                      Tensor::from_data(std::move(shape), std::move(data)));
  }
  if (!r.at_eof()) {
    throw std::runtime_error("checkpoint '" + path.string() +
                             "': trailing bytes at offset " + std::to_string(r.offset()));
  }
  return result;
}

}  // namespace fedseg
