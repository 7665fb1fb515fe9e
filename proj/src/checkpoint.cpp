#include <fstream>
#include <sstream>

#include "cmaml/error.hpp"
#include "cmaml/harness.hpp"
#include "json.hpp"

namespace cmaml::harness {

namespace {

using Json = nlohmann::ordered_json;

constexpr const char* kFormat = "cond-maml-checkpoint";

Json model_json(const models::MLPConfig& m) {
  Json j;
  j["input_dim"] = m.input_dim;
  j["hidden_dims"] = m.hidden_dims;
  j["n_classes"] = m.n_classes;
  j["seed"] = m.seed;
  return j;
}

std::string where(const std::filesystem::path& path) { return "checkpoint " + path.string() + ": "; }

// The entry table a config implies, without drawing random values.
std::vector<std::pair<std::string, Shape>> expected_layout(const models::MLPConfig& m) {
  std::vector<std::pair<std::string, Shape>> out;
  std::vector<std::size_t> dims{m.input_dim};
  dims.insert(dims.end(), m.hidden_dims.begin(), m.hidden_dims.end());
  dims.push_back(m.n_classes);
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    out.emplace_back("layer" + std::to_string(l) + ".weight", Shape{dims[l], dims[l + 1]});
    out.emplace_back("layer" + std::to_string(l) + ".bias", Shape{dims[l + 1]});
  }
  return out;
}

}  // namespace

std::string checkpoint_text(const Checkpoint& ckpt) {
  Json j;
  j["format"] = kFormat;
  j["version"] = kCheckpointVersion;
  j["model"] = model_json(ckpt.params.layout());
  j["iteration"] = ckpt.iteration;
  j["rng_state"] = ckpt.rng_state;
  Json entries = Json::array();
  for (const auto& e : ckpt.params.entries()) {
    Json entry;
    entry["name"] = e.name;
    entry["group"] = e.group;
    entry["shape"] = e.value.shape();
    entry["values"] = std::vector<double>(e.value.data().begin(), e.value.data().end());
    entries.push_back(std::move(entry));
  }
  j["entries"] = std::move(entries);
  return j.dump(1) + "\n";
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::string text = checkpoint_text(ckpt);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(where(path) + "cannot open for writing");
    out << text;
    if (!out.flush()) throw IoError(where(path) + "write failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError(where(path) + "rename failed: " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(where(path) + "cannot open");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::exception& e) {
    throw IoError(where(path) + "corrupt file (" + e.what() + ")");
  }

  try {
    if (!j.is_object() || j.value("format", std::string{}) != kFormat) throw IoError(where(path) + "not a checkpoint");
    const int version = j.at("version").get<int>();
    if (version != kCheckpointVersion) {
      throw IoError(where(path) + "unsupported version " + std::to_string(version) + ", expected " +
                    std::to_string(kCheckpointVersion));
    }
    models::MLPConfig m;
    const Json& jm = j.at("model");
    m.input_dim = jm.at("input_dim").get<std::size_t>();
    m.hidden_dims = jm.at("hidden_dims").get<std::vector<std::size_t>>();
    m.n_classes = jm.at("n_classes").get<std::size_t>();
    m.seed = jm.at("seed").get<std::uint64_t>();
    try {
      m.validate();
    } catch (const ConfigError& e) {
      throw IoError(where(path) + "invalid model config (" + e.what() + ")");
    }

    const auto layout = expected_layout(m);
    const Json& je = j.at("entries");
    if (!je.is_array() || je.size() != layout.size()) {
      throw IoError(where(path) + "has " + std::to_string(je.size()) + " entries, model needs " +
                    std::to_string(layout.size()));
    }
    std::vector<models::ParamEntry> entries;
    for (std::size_t i = 0; i < layout.size(); ++i) {
      const std::string name = je[i].at("name").get<std::string>();
      const Shape shape = je[i].at("shape").get<Shape>();
      if (name != layout[i].first || shape != layout[i].second) {
        throw IoError(where(path) + "entry " + std::to_string(i) + " is " + name + " " + to_string(shape) +
                      ", model needs " + layout[i].first + " " + to_string(layout[i].second));
      }
      std::vector<double> values = je[i].at("values").get<std::vector<double>>();
      if (values.size() != numel(shape)) {
        throw IoError(where(path) + "entry " + name + " has " + std::to_string(values.size()) + " values, shape " +
                      to_string(shape) + " needs " + std::to_string(numel(shape)));
      }
      entries.push_back({name, je[i].at("group").get<std::string>(), Tensor(shape, std::move(values))});
    }
    Checkpoint out;
    out.params = models::ParamSet(m, std::move(entries));
    out.iteration = j.at("iteration").get<std::size_t>();
    out.rng_state = j.at("rng_state").get<std::string>();
    return out;
  } catch (const Json::exception& e) {
    throw IoError(where(path) + "malformed (" + e.what() + ")");
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const models::MLPConfig& expected) {
  Checkpoint ckpt = load_checkpoint(path);
  const auto want = expected_layout(expected);
  const auto have = ckpt.params.entries();
  for (std::size_t i = 0; i < std::max(want.size(), have.size()); ++i) {
    if (i >= have.size()) throw IoError(where(path) + "missing entry " + want[i].first);
    if (i >= want.size()) throw IoError(where(path) + "unexpected entry " + have[i].name);
    if (have[i].name != want[i].first || have[i].value.shape() != want[i].second) {
      throw IoError(where(path) + "entry " + have[i].name + " " + to_string(have[i].value.shape()) +
                    " does not match expected " + want[i].first + " " + to_string(want[i].second));
    }
  }
  return ckpt;
}

}  // namespace cmaml::harness
