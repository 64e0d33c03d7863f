#include "segkey/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <sstream>

#include "segkey/error.hpp"
#include "segkey/serialize.hpp"

namespace segkey {
namespace {

constexpr char kMagic[4] = {'S', 'G', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void write_string(std::ostream& out, const std::string& s) {
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in) {
  const std::uint32_t n = read_u32(in);
  if (n > (1u << 20)) throw FormatError("checkpoint string too long");
  std::string s(n, '\0');
  if (!in.read(s.data(), n)) throw FormatError("truncated checkpoint string");
  return s;
}

}  // namespace

std::string config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["variant"] = to_string(c.variant);
  j["in_channels"] = c.in_channels;
  j["base_channels"] = c.base_channels;
  j["num_classes"] = c.num_classes;
  j["tap_channels"] = c.tap_channels;
  j["init_seed"] = c.init_seed;
  return j.dump();
}

ModelConfig config_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    ModelConfig c;
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.in_channels = j.at("in_channels").get<std::size_t>();
    c.base_channels = j.at("base_channels").get<std::size_t>();
    c.num_classes = j.at("num_classes").get<std::size_t>();
    c.tap_channels = j.at("tap_channels").get<std::array<std::size_t, kNumTaps>>();
    c.init_seed = j.at("init_seed").get<std::uint64_t>();
    validate_config(c);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad model config: ") + e.what());
  } catch (const ShapeError& e) {
    throw FormatError(e.what());
  }
}

std::string serialize_checkpoint(const Model& model) {
  std::ostringstream out(std::ios::binary);
  out.write(kMagic, 4);
  write_u32(out, kVersion);
  write_string(out, config_to_json(model.config()));
  const auto& params = model.parameters();
  const auto& bns = model.batch_norms();
  write_u32(out, static_cast<std::uint32_t>(params.size() + 2 * bns.size()));
  for (const Parameter& p : params) {
    write_string(out, p.name);
    write_tensor(out, p.value);
  }
  for (const BatchNormBuffer& b : bns) {
    write_string(out, b.name + ".running_mean");
    write_tensor(out, b.state.running_mean);
    write_string(out, b.name + ".running_var");
    write_tensor(out, b.state.running_var);
  }
  std::string bytes = out.str();
  std::ostringstream tail(std::ios::binary);
  write_u32(tail, crc32(bytes));
  return bytes + tail.str();
}

Model deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 12 || bytes.compare(0, 4, kMagic, 4) != 0) {
    throw FormatError("not a checkpoint (bad magic at byte offset 0)");
  }
  const std::string body = bytes.substr(0, bytes.size() - 4);
  std::istringstream tail(bytes.substr(bytes.size() - 4), std::ios::binary);
  if (read_u32(tail) != crc32(body)) throw FormatError("checkpoint CRC mismatch");

  std::istringstream in(body, std::ios::binary);
  in.seekg(4);
  const std::uint32_t version = read_u32(in);
  if (version != kVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  Model model(config_from_json(read_string(in)));
  auto& params = model.parameters();
  auto& bns = model.batch_norms();
  const std::uint32_t count = read_u32(in);
  if (count != params.size() + 2 * bns.size()) {
    throw FormatError("checkpoint holds " + std::to_string(count) +
                      " tensors, model expects " +
                      std::to_string(params.size() + 2 * bns.size()));
  }
  auto load_into = [&](const std::string& expected, Tensor& dst) {
    const std::string name = read_string(in);
    if (name != expected) {
      throw FormatError("checkpoint tensor '" + name + "', expected '" + expected + "'");
    }
    Tensor t = read_tensor(in);
    if (t.shape() != dst.shape()) {
      throw FormatError("checkpoint tensor '" + name + "' has shape " +
                        shape_string(t.shape()) + ", expected " +
                        shape_string(dst.shape()));
    }
    dst = std::move(t);
  };
  for (Parameter& p : params) load_into(p.name, p.value);
  for (BatchNormBuffer& b : bns) {
    load_into(b.name + ".running_mean", b.state.running_mean);
    load_into(b.name + ".running_var", b.state.running_var);
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError("trailing bytes in checkpoint");
  }
  return model;
}

void save_checkpoint(const Model& model, const std::string& path) {
  write_file_bytes(path, serialize_checkpoint(model));
}

Model load_checkpoint(const std::string& path) {
  try {
    return deserialize_checkpoint(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

}  // namespace segkey
