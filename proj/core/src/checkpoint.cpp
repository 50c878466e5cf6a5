#include "srlvae/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "srlvae/error.hpp"
#include "srlvae/hash.hpp"

namespace srlvae {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'S', 'R', 'L', 'V', 'A', 'E', 'P', '1'};
constexpr const char* kFormat = "srlvae-checkpoint/1";

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw Error("checkpoint archive is truncated");
  return v;
}

struct Entry {
  std::string name;
  std::span<const double> values;
};

void append_entries(std::vector<Entry>& out, const nn::ConvNet& net, const std::string& prefix,
                    const std::vector<double>& params) {
  for (const auto& slice : net.param_slices(prefix)) {
    out.push_back({slice.name, std::span<const double>(params).subspan(slice.offset, slice.size)});
  }
}

void restore(const std::map<std::string, std::vector<double>>& archive, const nn::ConvNet& net,
             const std::string& prefix, std::vector<double>& params) {
  for (const auto& slice : net.param_slices(prefix)) {
    auto it = archive.find(slice.name);
    if (it == archive.end()) throw ConfigError(fmt::format("checkpoint is missing tensor {}", slice.name));
    if (it->second.size() != slice.size) {
      throw ConfigError(fmt::format("checkpoint tensor {} has {} values; architecture expects {}", slice.name,
                                    it->second.size(), slice.size));
    }
    std::copy(it->second.begin(), it->second.end(), params.begin() + static_cast<std::ptrdiff_t>(slice.offset));
  }
}

json config_to_json(const VaeConfig& c) {
  return json{{"image_channels", c.image_channels},
              {"channels", c.channels},
              {"downsample_levels", c.downsample_levels},
              {"latent_channels", c.latent_channels},
              {"init_seed", c.init_seed}};
}

VaeConfig config_from_json(const json& j) {
  VaeConfig c;
  c.image_channels = j.at("image_channels").get<int>();
  c.channels = j.at("channels").get<std::vector<int>>();
  c.downsample_levels = j.at("downsample_levels").get<int>();
  c.latent_channels = j.at("latent_channels").get<int>();
  c.init_seed = j.at("init_seed").get<std::uint64_t>();
  return c;
}

}  // namespace

std::string encoder_hash(const VaeModel& model) { return hash_hex(model.encoder_params()); }
std::string decoder_hash(const VaeModel& model) { return hash_hex(model.decoder_params()); }

void save_checkpoint(const fs::path& dir, const VaeModel& model, const CheckpointMeta& meta) {
  std::vector<Entry> entries;
  append_entries(entries, model.encoder_net(), "encoder", model.encoder_params());
  append_entries(entries, model.decoder_net(), "decoder", model.decoder_params());
  if (model.has_reference()) append_entries(entries, model.encoder_net(), "reference_encoder", model.reference_params());

  json j;
  j["format"] = kFormat;
  j["architecture"] = config_to_json(model.config());
  j["downsampling_factor"] = model.config().downsampling_factor();
  j["image_size"] = {meta.image_height, meta.image_width};
  j["seed"] = meta.seed;
  j["extractor_seed"] = meta.extractor_seed;
  j["provenance"] = meta.provenance;
  j["hashes"] = {{"encoder", encoder_hash(model)}, {"decoder", decoder_hash(model)}};
  if (model.has_reference()) j["hashes"]["reference_encoder"] = hash_hex(model.reference_params());

  fs::path tmp = dir;
  tmp += ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  {
    std::ofstream os(tmp / "params.bin", std::ios::binary);
    os.write(kMagic, sizeof(kMagic));
    write_pod<std::uint64_t>(os, entries.size());
    for (const auto& e : entries) {
      write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
      os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
      write_pod<std::uint64_t>(os, e.values.size());
      os.write(reinterpret_cast<const char*>(e.values.data()), static_cast<std::streamsize>(e.values.size_bytes()));
    }
    if (!os) throw Error(fmt::format("failed writing checkpoint archive in {}", tmp.string()));
  }
  {
    std::ofstream os(tmp / "meta.json");
    os << j.dump(2) << '\n';
    if (!os) throw Error(fmt::format("failed writing checkpoint metadata in {}", tmp.string()));
  }
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

Checkpoint load_checkpoint(const fs::path& dir) {
  std::ifstream ms(dir / "meta.json");
  if (!ms) throw ConfigError(fmt::format("{} is not a checkpoint directory (missing meta.json)", dir.string()));
  json j;
  try {
    j = json::parse(ms);
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("corrupt checkpoint metadata: {}", e.what()));
  }
  if (j.value("format", "") != kFormat) throw ConfigError("unsupported checkpoint format");

  CheckpointMeta meta;
  try {
    meta.config = config_from_json(j.at("architecture"));
    meta.image_height = j.at("image_size").at(0).get<int>();
    meta.image_width = j.at("image_size").at(1).get<int>();
    meta.seed = j.at("seed").get<std::uint64_t>();
    meta.extractor_seed = j.at("extractor_seed").get<std::uint64_t>();
    meta.provenance = j.at("provenance").get<std::map<std::string, std::string>>();
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("checkpoint metadata is incomplete: {}", e.what()));
  }
  if (j.at("downsampling_factor").get<int>() != meta.config.downsampling_factor()) {
    throw ConfigError("checkpoint downsampling factor disagrees with its architecture");
  }

  std::ifstream is(dir / "params.bin", std::ios::binary);
  if (!is) throw ConfigError(fmt::format("checkpoint {} has no params.bin", dir.string()));
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(magic)) != 0) throw ConfigError("params.bin has a bad header");
  std::map<std::string, std::vector<double>> archive;
  const auto count = read_pod<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = read_pod<std::uint32_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    const auto n = read_pod<std::uint64_t>(is);
    std::vector<double> values(n);
    is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!is) throw Error("checkpoint archive is truncated");
    archive.emplace(std::move(name), std::move(values));
  }

  VaeModel model(meta.config);
  restore(archive, model.encoder_net(), "encoder", model.encoder_params());
  restore(archive, model.decoder_net(), "decoder", model.decoder_params());
  if (archive.contains("reference_encoder/conv0/weight")) {
    std::vector<double> ref(model.encoder_params().size());
    restore(archive, model.encoder_net(), "reference_encoder", ref);
    model.set_reference(std::move(ref));
  }
  return {std::move(model), std::move(meta)};
}

}  // namespace srlvae
