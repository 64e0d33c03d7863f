#include "segkey/dataio.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "segkey/error.hpp"
#include "segkey/serialize.hpp"

namespace segkey {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::array<double, 3> class_color(std::size_t cls) {
  static constexpr std::array<std::array<double, 3>, 6> kPalette{{
      {0.85, 0.20, 0.20},
      {0.20, 0.80, 0.25},
      {0.20, 0.30, 0.90},
      {0.90, 0.85, 0.15},
      {0.80, 0.25, 0.85},
      {0.15, 0.85, 0.85},
  }};
  return kPalette[(cls - 1) % kPalette.size()];
}

enum class ShapeKind { kDisk, kRect, kTriangle };

double edge(double ax, double ay, double bx, double by, double px, double py) {
  return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

SegSample make_sample(std::size_t size, std::size_t num_classes, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.04);
  const double s = static_cast<double>(size);

  SegSample out{Tensor({3, size, size}), LabelMap(size, size, 0)};
  const double gray = 0.25 + 0.5 * unit(rng);
  std::array<double, 3> bg;
  for (auto& v : bg) v = gray + 0.1 * (unit(rng) - 0.5);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t p = 0; p < size * size; ++p) {
      out.image[c * size * size + p] = bg[c];
    }
  }

  std::uniform_int_distribution<int> count_dist(1, 3);
  std::uniform_int_distribution<std::size_t> class_dist(1, num_classes - 1);
  const int count = count_dist(rng);
  for (int shape = 0; shape < count; ++shape) {
    const std::size_t cls = class_dist(rng);
    const auto kind = static_cast<ShapeKind>((cls - 1) % 3);
    auto color = class_color(cls);
    for (auto& v : color) v = std::clamp(v + 0.2 * (unit(rng) - 0.5), 0.0, 1.0);

    const double r = s * (0.1 + 0.15 * unit(rng));
    const double cx = r + (s - 2 * r) * unit(rng);
    const double cy = r + (s - 2 * r) * unit(rng);
    const double half_w = r * (0.6 + 0.4 * unit(rng));
    const double half_h = r * (0.6 + 0.4 * unit(rng));
    const double rot = 2.0 * M_PI * unit(rng);
    std::array<double, 6> tri;
    for (int v = 0; v < 3; ++v) {
      const double a = rot + v * 2.0 * M_PI / 3.0;
      tri[2 * v] = cx + r * std::cos(a);
      tri[2 * v + 1] = cy + r * std::sin(a);
    }

    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double px = static_cast<double>(x) + 0.5;
        const double py = static_cast<double>(y) + 0.5;
        bool inside = false;
        switch (kind) {
          case ShapeKind::kDisk:
            inside = (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
            break;
          case ShapeKind::kRect:
            inside = std::abs(px - cx) <= half_w && std::abs(py - cy) <= half_h;
            break;
          case ShapeKind::kTriangle: {
            const double e0 = edge(tri[0], tri[1], tri[2], tri[3], px, py);
            const double e1 = edge(tri[2], tri[3], tri[4], tri[5], px, py);
            const double e2 = edge(tri[4], tri[5], tri[0], tri[1], px, py);
            inside = (e0 >= 0 && e1 >= 0 && e2 >= 0) ||
                     (e0 <= 0 && e1 <= 0 && e2 <= 0);
            break;
          }
        }
        if (!inside) continue;
        out.label.at(y, x) = static_cast<std::uint8_t>(cls);
        for (std::size_t c = 0; c < 3; ++c) {
          out.image[(c * size + y) * size + x] = color[c];
        }
      }
    }
  }
  // 8-bit levels so images survive a PPM round trip unchanged.
  for (double& v : out.image.data()) {
    v = std::round(std::clamp(v + noise(rng), 0.0, 1.0) * 255.0) / 255.0;
  }
  return out;
}

}  // namespace

std::vector<SegSample> gen_toy_dataset(std::size_t n, std::size_t size,
                                       std::size_t num_classes,
                                       std::uint64_t seed) {
  if (num_classes < 2 || num_classes > 255) {
    throw ShapeError("gen_toy_dataset: num_classes must be in 2..255");
  }
  if (size < 16) throw ShapeError("gen_toy_dataset: size must be >= 16");
  std::vector<SegSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(splitmix64(seed ^ splitmix64(i)));
    out.push_back(make_sample(size, num_classes, rng));
  }
  return out;
}

DatasetSplit make_toy_split(const ToyDatasetParams& p) {
  const std::uint64_t base = splitmix64(p.seed);
  return DatasetSplit{
      gen_toy_dataset(p.train, p.size, p.num_classes, base + 1),
      gen_toy_dataset(p.val, p.size, p.num_classes, base + 2),
      gen_toy_dataset(p.dev, p.size, p.num_classes, base + 3),
  };
}

// --- PNM ------------------------------------------------------------------

namespace {

struct PnmHeader {
  std::size_t width = 0, height = 0, maxval = 0;
  std::size_t payload_offset = 0;
};

PnmHeader parse_pnm_header(const std::string& bytes, const char* magic) {
  if (bytes.size() < 2 || bytes.compare(0, 2, magic) != 0) {
    throw FormatError(std::string("bad magic at byte offset 0, expected ") + magic);
  }
  std::size_t pos = 2;
  auto next_number = [&](const char* field) -> std::size_t {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    std::size_t value = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      value = value * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (value > (1u << 20)) {
        throw FormatError(std::string("header ") + field + " too large at byte offset " +
                          std::to_string(start));
      }
      ++pos;
    }
    if (pos == start) {
      throw FormatError(std::string("expected ") + field + " at byte offset " +
                        std::to_string(start));
    }
    return value;
  };
  PnmHeader h;
  h.width = next_number("width");
  h.height = next_number("height");
  h.maxval = next_number("maxval");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw FormatError("missing separator after header at byte offset " +
                      std::to_string(pos));
  }
  h.payload_offset = pos + 1;
  if (h.maxval != 255) {
    throw FormatError("maxval " + std::to_string(h.maxval) +
                      " unsupported (only 255)");
  }
  if (h.width == 0 || h.height == 0) throw FormatError("empty image");
  return h;
}

void check_payload(const std::string& bytes, const PnmHeader& h,
                   std::size_t expected) {
  const std::size_t have = bytes.size() - h.payload_offset;
  if (have < expected) {
    throw FormatError("truncated payload at byte offset " +
                      std::to_string(bytes.size()) + " (expected " +
                      std::to_string(h.payload_offset + expected) + " bytes)");
  }
}

std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

Tensor decode_ppm(const std::string& bytes) {
  const PnmHeader h = parse_pnm_header(bytes, "P6");
  check_payload(bytes, h, h.width * h.height * 3);
  Tensor img({3, h.height, h.width});
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + h.payload_offset;
  for (std::size_t i = 0; i < h.width * h.height; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      img[c * h.width * h.height + i] = p[3 * i + c] / 255.0;
    }
  }
  return img;
}

std::string encode_ppm(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("encode_ppm: expected (3,h,w), got " + shape_string(image.shape()));
  }
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  const std::size_t header = out.size();
  out.resize(header + 3 * w * h);
  for (std::size_t i = 0; i < w * h; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      out[header + 3 * i + c] = static_cast<char>(quantize(image[c * w * h + i]));
    }
  }
  return out;
}

LabelMap decode_pgm(const std::string& bytes) {
  const PnmHeader h = parse_pnm_header(bytes, "P5");
  check_payload(bytes, h, h.width * h.height);
  LabelMap label(h.height, h.width);
  std::copy_n(bytes.data() + h.payload_offset, h.width * h.height,
              reinterpret_cast<char*>(label.data.data()));
  return label;
}

std::string encode_pgm(const LabelMap& label) {
  std::string out = "P5\n" + std::to_string(label.width) + " " +
                    std::to_string(label.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(label.data.data()), label.data.size());
  return out;
}

Tensor read_image(const std::string& path) {
  try {
    return decode_ppm(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

void write_image(const std::string& path, const Tensor& image) {
  write_file_bytes(path, encode_ppm(image));
}

LabelMap read_label(const std::string& path) {
  try {
    return decode_pgm(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

void write_label(const std::string& path, const LabelMap& label) {
  write_file_bytes(path, encode_pgm(label));
}

// --- dataset directories ---------------------------------------------------

namespace {

constexpr const char* kSplitNames[] = {"train", "val", "dev"};

template <typename Split>
auto& split_member(Split& s, int i) {
  return i == 0 ? s.train : (i == 1 ? s.val : s.dev);
}

std::string sample_stem(std::size_t i) {
  std::array<char, 24> buf{};
  std::snprintf(buf.data(), buf.size(), "%06zu", i);
  return buf.data();
}

}  // namespace

void write_dataset(const std::string& dir, const DatasetSplit& split,
                   const ToyDatasetParams& params) {
  namespace fs = std::filesystem;
  nlohmann::json manifest;
  manifest["format"] = "segkey-dataset";
  manifest["version"] = 1;
  manifest["generator"] = {{"size", params.size},
                           {"num_classes", params.num_classes},
                           {"seed", params.seed},
                           {"train", params.train},
                           {"val", params.val},
                           {"dev", params.dev}};
  for (int i = 0; i < 3; ++i) {
    const fs::path sub = fs::path(dir) / kSplitNames[i];
    fs::create_directories(sub);
    nlohmann::json names = nlohmann::json::array();
    const auto& samples = split_member(split, i);
    for (std::size_t k = 0; k < samples.size(); ++k) {
      const std::string stem = std::string(kSplitNames[i]) + "/" + sample_stem(k);
      write_image((fs::path(dir) / (stem + ".ppm")).string(), samples[k].image);
      write_label((fs::path(dir) / (stem + ".pgm")).string(), samples[k].label);
      names.push_back(stem);
    }
    manifest["splits"][kSplitNames[i]] = names;
  }
  write_file_bytes((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

LoadedDataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::string manifest_path = (fs::path(dir) / "manifest.json").string();
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file_bytes(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path + ": " + e.what());
  }
  LoadedDataset out;
  try {
    const auto& gen = manifest.at("generator");
    out.params.size = gen.at("size").get<std::size_t>();
    out.params.num_classes = gen.at("num_classes").get<std::size_t>();
    out.params.seed = gen.at("seed").get<std::uint64_t>();
    for (int i = 0; i < 3; ++i) {
      auto& samples = split_member(out.split, i);
      for (const auto& stem : manifest.at("splits").at(kSplitNames[i])) {
        const std::string base = (fs::path(dir) / stem.get<std::string>()).string();
        SegSample s{read_image(base + ".ppm"), read_label(base + ".pgm")};
        if (s.label.height != s.image.dim(1) || s.label.width != s.image.dim(2)) {
          throw FormatError(base + ": image and label sizes differ");
        }
        for (std::uint8_t v : s.label.data) {
          if (v >= out.params.num_classes) {
            throw FormatError(base + ".pgm: label value " + std::to_string(v) +
                              " >= num_classes " +
                              std::to_string(out.params.num_classes));
          }
        }
        samples.push_back(std::move(s));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path + ": " + e.what());
  }
  out.params.train = out.split.train.size();
  out.params.val = out.split.val.size();
  out.params.dev = out.split.dev.size();
  return out;
}

}  // namespace segkey
