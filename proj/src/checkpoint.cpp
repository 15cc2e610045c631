#include "ssalab/checkpoint.hpp"

#include "ssalab/config.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace ssalab {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are little-endian");

namespace {

template <typename T>
void put(std::vector<std::uint8_t>& out, const T& v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

void put_doubles(std::vector<std::uint8_t>& out, const double* data, Index n) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(data);
  out.insert(out.end(), p, p + n * static_cast<Index>(sizeof(double)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  void read(void* dst, std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
    }
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> save_checkpoint(const Model& model, const AdamState* optimizer,
                                          const CheckpointMeta& meta) {
  const auto params = model.parameters();
  if (optimizer && (optimizer->m.size() != params.size() || optimizer->v.size() != params.size())) {
    throw DimensionError("save_checkpoint: optimizer state does not match the parameter list");
  }
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& p : params) manifest.push_back({{"name", p.name}, {"shape", p.tensor->shape()}});
  nlohmann::json header{{"model", to_json(model.config())},
                        {"meta",
                         {{"step", meta.step},
                          {"model_seed", meta.model_seed},
                          {"data_seed", meta.data_seed},
                          {"extra", meta.extra}}},
                        {"parameters", manifest},
                        {"optimizer", optimizer != nullptr}};
  if (optimizer) header["optimizer_step"] = optimizer->step;
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 8);
  put(out, kCheckpointVersion);
  put(out, static_cast<std::uint64_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& p : params) put_doubles(out, p.tensor->data(), p.tensor->size());
  if (optimizer) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (optimizer->m[i].size() != params[i].tensor->size() || optimizer->v[i].size() != params[i].tensor->size()) {
        throw DimensionError("save_checkpoint: moment shape mismatch for " + params[i].name);
      }
      put_doubles(out, optimizer->m[i].data(), optimizer->m[i].size());
      put_doubles(out, optimizer->v[i].data(), optimizer->v[i].size());
    }
  }
  return out;
}

LoadedCheckpoint load_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  char magic[8];
  r.read(magic, 8, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0) throw CheckpointError("not a checkpoint: bad magic");
  std::uint32_t version = 0;
  r.read(&version, sizeof version, "version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  std::uint64_t header_size = 0;
  r.read(&header_size, sizeof header_size, "header size");
  if (header_size > r.remaining()) throw CheckpointError("checkpoint truncated inside the header");
  std::string text(header_size, '\0');
  r.read(text.data(), header_size, "header");

  nlohmann::json header;
  ModelConfig config;
  CheckpointMeta meta;
  bool has_optimizer = false;
  std::int64_t optimizer_step = 0;
  try {
    header = nlohmann::json::parse(text);
    config = model_from_json(header.at("model"), "model");
    const auto& m = header.at("meta");
    meta.step = m.at("step").get<std::int64_t>();
    meta.model_seed = m.at("model_seed").get<std::uint64_t>();
    meta.data_seed = m.at("data_seed").get<std::uint64_t>();
    meta.extra = m.at("extra");
    has_optimizer = header.at("optimizer").get<bool>();
    if (has_optimizer) optimizer_step = header.at("optimizer_step").get<std::int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("invalid model config in checkpoint: ") + e.what());
  }

  Model model(config, meta.model_seed);
  auto params = model.parameters();
  const auto& manifest = header.at("parameters");
  if (!manifest.is_array() || manifest.size() != params.size()) {
    throw CheckpointError("checkpoint parameter manifest does not match the model config");
  }
  Index total = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& entry = manifest[i];
    if (entry.value("name", std::string()) != params[i].name ||
        entry.value("shape", Shape()) != params[i].tensor->shape()) {
      throw CheckpointError("checkpoint parameter " + std::to_string(i) + " (" + entry.value("name", std::string("?")) +
                            ") does not match " + params[i].name + " " + shape_string(params[i].tensor->shape()));
    }
    total += params[i].tensor->size();
  }
  const std::size_t expected =
      static_cast<std::size_t>(total) * sizeof(double) * (has_optimizer ? 3 : 1);
  if (r.remaining() != expected) {
    throw CheckpointError("checkpoint payload has " + std::to_string(r.remaining()) + " bytes, expected " +
                          std::to_string(expected));
  }
  for (auto& p : params) r.read(p.tensor->data(), static_cast<std::size_t>(p.tensor->size()) * sizeof(double), "parameters");
  std::optional<AdamState> optimizer;
  if (has_optimizer) {
    AdamState s;
    s.step = optimizer_step;
    for (const auto& p : params) {
      Eigen::VectorXd m(p.tensor->size()), v(p.tensor->size());
      r.read(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double), "optimizer moments");
      r.read(v.data(), static_cast<std::size_t>(v.size()) * sizeof(double), "optimizer moments");
      s.m.push_back(std::move(m));
      s.v.push_back(std::move(v));
    }
    optimizer = std::move(s);
  }
  return LoadedCheckpoint{std::move(model), std::move(optimizer), std::move(meta)};
}

void write_checkpoint_file(const std::filesystem::path& file, const std::vector<std::uint8_t>& bytes) {
  const auto tmp = std::filesystem::path(file.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, file);
}

std::vector<std::uint8_t> read_checkpoint_file(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + file.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string digest_hex(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace ssalab
