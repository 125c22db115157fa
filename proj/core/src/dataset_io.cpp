#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "fedseg/synth.hpp"

namespace fedseg {

namespace {

constexpr char kRasterMagic[6] = {'F', 'S', 'R', 'A', 'S', '1'};
constexpr unsigned char kDtypeF64 = 0;
constexpr unsigned char kDtypeU8 = 1;

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

void write_raster(const std::filesystem::path& path, const Tensor& t, bool as_u8) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("save_dataset: cannot open '" + path.string() + "'");
  os.write(kRasterMagic, sizeof(kRasterMagic));
  os.put(static_cast<char>(as_u8 ? kDtypeU8 : kDtypeF64));
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put_u64(os, d);
  if (as_u8) {
    for (double v : t.data()) os.put(v != 0.0 ? '\1' : '\0');
  } else {
    for (double v : t.data()) put_u64(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw std::runtime_error("save_dataset: write failed for '" + path.string() + "'");
}

class RasterReader {
 public:
  RasterReader(const std::filesystem::path& path) : path_(path.string()), is_(path, std::ios::binary) {
    if (!is_) throw std::runtime_error("load_dataset: cannot open '" + path_ + "'");
  }

  Tensor read(bool expect_u8, const std::vector<std::size_t>& expect_shape) {
    char magic[6];
    bytes(magic, sizeof(magic));
    if (std::memcmp(magic, kRasterMagic, sizeof(kRasterMagic)) != 0) {
      throw std::runtime_error("load_dataset: '" + path_ + "': bad magic at byte offset 0");
    }
    unsigned char dtype = 0;
    bytes(&dtype, 1);
    if (dtype != (expect_u8 ? kDtypeU8 : kDtypeF64)) {
      throw std::runtime_error("load_dataset: '" + path_ + "': unexpected dtype at byte offset " +
                               std::to_string(offset_ - 1));
    }
    const std::uint32_t rank = u32();
    if (rank > 8) {
      throw std::runtime_error("load_dataset: '" + path_ + "': implausible rank at byte offset " +
                               std::to_string(offset_ - 4));
    }
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(u64());
    if (shape != expect_shape) {
      throw std::runtime_error("load_dataset: '" + path_ + "': declared shape " +
                               Tensor::shape_str(shape) + " does not match manifest shape " +
                               Tensor::shape_str(expect_shape));
    }
    std::vector<double> data(Tensor::numel(shape));
    if (expect_u8) {
      for (auto& v : data) {
        unsigned char byte = 0;
        bytes(&byte, 1);
        if (byte > 1) {
          throw std::runtime_error("load_dataset: '" + path_ + "': mask byte not 0/1 at offset " +
                                   std::to_string(offset_ - 1));
        }
        v = byte ? 1.0 : 0.0;
      }
    } else {
      for (auto& v : data) v = std::bit_cast<double>(u64());
    }
    is_.peek();
    if (!is_.eof()) {
      throw std::runtime_error("load_dataset: '" + path_ + "': trailing bytes at offset " +
                               std::to_string(offset_));
    }
    return Tensor::from_data(std::move(shape), std::move(data));
  }

 private:
  void bytes(void* dst, std::size_t n) {
    is_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) {
      throw std::runtime_error("load_dataset: '" + path_ + "': truncated at byte offset " +
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

  std::string path_;
  std::ifstream is_;
  std::size_t offset_ = 0;
};

std::string case_stem(const Sample& s) {
  std::ostringstream os;
  os << s.client_id << "_case" << std::setw(3) << std::setfill('0') << s.case_id;
  return os.str();
}

}  // namespace

void save_dataset(const std::vector<Sample>& samples, const std::filesystem::path& dir,
                  std::uint64_t config_digest) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "fedseg-dataset-v1";
  std::ostringstream digest_hex;
  digest_hex << std::hex << std::setw(16) << std::setfill('0') << config_digest;
  manifest["config_digest"] = digest_hex.str();
  manifest["cases"] = nlohmann::json::array();

  for (const auto& s : samples) {
    const std::string stem = case_stem(s);
    write_raster(dir / (stem + ".image.f64"), s.image, false);
    write_raster(dir / (stem + ".label.u8"), s.label, true);
    write_raster(dir / (stem + ".brain.u8"), s.brain_mask, true);
    nlohmann::json rec;
    rec["client_id"] = s.client_id;
    rec["case_id"] = s.case_id;
    rec["shape"] = s.image.shape();
    rec["image"] = stem + ".image.f64";
    rec["label"] = stem + ".label.u8";
    rec["brain"] = stem + ".brain.u8";
    manifest["cases"].push_back(std::move(rec));
  }

  std::ofstream os(dir / "manifest.json", std::ios::trunc);
  if (!os) {
    throw std::runtime_error("save_dataset: cannot write manifest in '" + dir.string() + "'");
  }
  os << manifest.dump(2) << "\n";
}

std::vector<Sample> load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) {
    throw std::runtime_error("load_dataset: missing manifest.json in '" + dir.string() + "'");
  }
  nlohmann::json manifest;
  try {
    is >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("load_dataset: malformed manifest.json: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "fedseg-dataset-v1") {
    throw std::runtime_error("load_dataset: manifest format is not fedseg-dataset-v1");
  }

  std::vector<Sample> samples;
  for (const auto& rec : manifest.at("cases")) {
    Sample s;
    s.client_id = rec.at("client_id").get<std::string>();
    s.case_id = rec.at("case_id").get<int>();
    const auto shape = rec.at("shape").get<std::vector<std::size_t>>();
    s.image = RasterReader(dir / rec.at("image").get<std::string>()).read(false, shape);
    s.label = RasterReader(dir / rec.at("label").get<std::string>()).read(true, shape);
    s.brain_mask = RasterReader(dir / rec.at("brain").get<std::string>()).read(true, shape);
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace fedseg
