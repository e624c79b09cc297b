#include "pldet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "pldet/config.hpp"
#include "pldet/errors.hpp"

namespace pldet {

namespace {

constexpr char kMagic[8] = {'P', 'L', 'D', 'C', 'K', 'P', 'T', '1'};

static_assert(std::endian::native == std::endian::little,
              "checkpoints are little-endian; big-endian hosts are unsupported");

std::string rng_to_string(const Rng& rng) {
  std::ostringstream os;
  os << rng.engine();
  return os.str();
}

Rng rng_from_string(const std::string& text) {
  Rng rng(0);
  std::istringstream is(text);
  is >> rng.engine();
  if (is.fail()) throw IoError("checkpoint: malformed RNG state");
  return rng;
}

}  // namespace

void save_checkpoint(const std::string& path, const TrainState& state) {
  nlohmann::ordered_json header;
  header["format"] = "pldet-checkpoint";
  header["version"] = 1;
  header["detector"] = nlohmann::json::parse(detector_config_to_json_text(state.det_cfg));
  header["sspl"] = nlohmann::json::parse(sspl_config_to_json_text(state.sspl_cfg));
  header["hyperparams"] = nlohmann::json::parse(hyperparams_to_json_text(state.hp));
  header["iter"] = state.iter;
  header["epoch"] = state.epoch;
  header["seed"] = state.seed;
  header["rng"] = rng_to_string(state.rng);
  auto params = nlohmann::ordered_json::array();
  for (const auto& [name, tensor] : state.named_params())
    params.push_back({{"name", name}, {"shape", tensor.shape()}});
  header["params"] = params;

  std::string header_text = header.dump();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint: cannot write " + path);
  f.write(kMagic, sizeof(kMagic));
  std::uint64_t len = header_text.size();
  f.write(reinterpret_cast<const char*>(&len), sizeof(len));
  f.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  for (const auto& [name, tensor] : state.named_params()) {
    auto data = tensor.data();
    f.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
  }
  if (!f) throw IoError("checkpoint: write failed for " + path);
}

TrainState load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint: cannot open " + path);
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IoError("checkpoint: bad magic in " + path);
  std::uint64_t len = 0;
  f.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string header_text(len, '\0');
  f.read(header_text.data(), static_cast<std::streamsize>(len));
  if (!f) throw IoError("checkpoint: truncated header in " + path);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(std::string("checkpoint: malformed header: ") + e.what());
  }
  if (header.value("format", "") != "pldet-checkpoint")
    throw IoError("checkpoint: unexpected format tag");

  DetectorConfig det_cfg = detector_config_from_json_text(header.at("detector").dump());
  SsplConfig sspl_cfg = sspl_config_from_json_text(header.at("sspl").dump());
  HyperParams hp = hyperparams_from_json_text(header.at("hyperparams").dump());

  TrainState state = init_state(det_cfg, sspl_cfg, hp, header.at("seed").get<std::uint64_t>());
  state.iter = header.at("iter").get<long>();
  state.epoch = header.at("epoch").get<int>();
  state.rng = rng_from_string(header.at("rng").get<std::string>());

  auto params = state.named_params();
  const auto& header_params = header.at("params");
  if (header_params.size() != params.size())
    throw IoError("checkpoint: parameter count mismatch");
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& entry = header_params.at(i);
    if (entry.at("name").get<std::string>() != params[i].first)
      throw IoError("checkpoint: parameter name mismatch at index " + std::to_string(i));
    if (entry.at("shape").get<std::vector<int>>() != params[i].second.shape())
      throw IoError("checkpoint: shape mismatch for " + params[i].first);
    auto data = params[i].second.raw_data();
    f.read(reinterpret_cast<char*>(data.data()),
           static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!f) throw IoError("checkpoint: truncated data in " + path);
  }
  return state;
}

}  // namespace pldet
