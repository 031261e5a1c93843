#include "pkmlab/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

#include "pkmlab/config.hpp"

namespace pkmlab {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint IO assumes a little-endian host");

namespace {

std::map<std::string, Param<float>*> by_name(Encoder<float>& model) {
  std::map<std::string, Param<float>*> out;
  for (Param<float>* p : model.params()) {
    if (!out.emplace(p->name, p).second) {
      throw std::logic_error("duplicate parameter name " + p->name);
    }
  }
  return out;
}

void write_file(const fs::path& path, const char* data, std::size_t n) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(data, static_cast<std::streamsize>(n));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

}  // namespace

void save_checkpoint(Encoder<float>& model, const fs::path& dir, std::int64_t step,
                     const json& extra) {
  fs::create_directories(dir);
  json tensors = json::array();
  std::vector<char> blob;
  for (const auto& [name, p] : by_name(model)) {
    const std::size_t bytes = p->value.size() * sizeof(float);
    tensors.push_back({{"name", name},
                       {"shape", p->value.shape()},
                       {"offset", blob.size()},
                       {"length", bytes}});
    const auto* src = reinterpret_cast<const char*>(p->value.data());
    blob.insert(blob.end(), src, src + bytes);
  }
  json manifest = {{"format", kCheckpointFormat},
                   {"version", kCheckpointVersion},
                   {"step", step},
                   {"model", to_json(model.config())},
                   {"run", extra},
                   {"blob", {{"file", "params.bin"}, {"length", blob.size()}}},
                   {"tensors", tensors}};
  write_file(dir / "params.bin", blob.data(), blob.size());
  const std::string text = manifest.dump(2) + "\n";
  write_file(dir / "manifest.json", text.data(), text.size());
}

Checkpoint load_checkpoint(const fs::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("checkpoint: missing " + (dir / "manifest.json").string());
  json manifest;
  try {
    manifest = json::parse(mf);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("checkpoint: unreadable manifest: ") + e.what());
  }
  if (manifest.value("format", "") != kCheckpointFormat) {
    throw std::runtime_error("checkpoint: unknown format in " + dir.string());
  }
  const int version = manifest.value("version", -1);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported manifest version " + std::to_string(version));
  }

  std::ifstream bf(dir / "params.bin", std::ios::binary);
  if (!bf) throw std::runtime_error("checkpoint: missing " + (dir / "params.bin").string());
  const std::vector<char> blob((std::istreambuf_iterator<char>(bf)),
                               std::istreambuf_iterator<char>());
  const auto declared = manifest.at("blob").at("length").get<std::size_t>();
  if (blob.size() != declared) {
    throw std::runtime_error("checkpoint: blob length mismatch (manifest " +
                             std::to_string(declared) + " bytes, file " +
                             std::to_string(blob.size()) + " bytes)");
  }

  Checkpoint ck;
  ck.step = manifest.at("step").get<std::int64_t>();
  ck.model = Encoder<float>(encoder_config_from_json(manifest.at("model")), 0);
  auto params = by_name(ck.model);
  std::size_t loaded = 0;
  for (const auto& t : manifest.at("tensors")) {
    const auto name = t.at("name").get<std::string>();
    const auto it = params.find(name);
    if (it == params.end()) throw std::runtime_error("checkpoint: unexpected tensor " + name);
    Param<float>& p = *it->second;
    const auto shape = t.at("shape").get<Shape>();
    if (shape != p.value.shape()) {
      throw std::runtime_error("checkpoint: shape mismatch for " + name + ": stored " +
                               shape_str(shape) + ", model " + shape_str(p.value.shape()));
    }
    const auto offset = t.at("offset").get<std::size_t>();
    const auto length = t.at("length").get<std::size_t>();
    if (length != p.value.size() * sizeof(float) || offset > blob.size() ||
        length > blob.size() - offset) {
      throw std::runtime_error("checkpoint: blob length mismatch for " + name);
    }
    std::memcpy(p.value.data(), blob.data() + offset, length);
    ++loaded;
  }
  if (loaded != params.size()) {
    for (const auto& [name, p] : params) {
      const bool present = std::any_of(manifest.at("tensors").begin(), manifest.at("tensors").end(),
                                       [&](const json& t) { return t.at("name") == name; });
      if (!present) throw std::runtime_error("checkpoint: missing tensor " + name);
    }
  }
  ck.manifest = std::move(manifest);
  return ck;
}

std::uint64_t parameter_hash(Encoder<float>& model, bool memory_only) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& [name, p] : by_name(model)) {
    if (memory_only && !p->memory) continue;
    for (const char c : name) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
    const auto* bytes = reinterpret_cast<const unsigned char*>(p->value.data());
    for (std::size_t i = 0; i < p->value.size() * sizeof(float); ++i) {
      h = (h ^ bytes[i]) * 1099511628211ULL;
    }
  }
  return h;
}

}  // namespace pkmlab
