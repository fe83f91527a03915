#include "epiguide/checkpoint.hpp"

#include "json.hpp"

#include "epiguide/error.hpp"

namespace epiguide {

namespace {

std::string config_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["s"] = c.s;
  j["m"] = c.m;
  j["heads"] = c.heads;
  j["layers"] = c.layers;
  j["mlp_width"] = c.mlp_width;
  j["num_freqs"] = c.num_freqs;
  j["epe"] = c.epe_enabled;
  return j.dump();
}

ModelConfig parse_config(const Tensor& t) {
  if (t.dtype != DType::U8) throw Error(ErrorCode::SchemaViolation, "checkpoint config must be u8");
  const std::string text(t.payload.begin(), t.payload.end());
  ModelConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    c.s = j.at("s").get<int>();
    c.m = j.at("m").get<int>();
    c.heads = j.at("heads").get<int>();
    c.layers = j.at("layers").get<int>();
    c.mlp_width = j.at("mlp_width").get<int>();
    c.num_freqs = j.at("num_freqs").get<int>();
    c.epe_enabled = j.at("epe").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::SchemaViolation, std::string("bad checkpoint config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace

TensorArchive checkpoint_archive(const RerankerParams& params) {
  TensorArchive archive;
  const std::string cfg = config_json(params.config());
  const std::vector<std::uint8_t> bytes(cfg.begin(), cfg.end());
  archive.emplace_back("config", Tensor::from_u8({static_cast<std::uint32_t>(bytes.size())}, bytes));
  for (std::size_t i = 0; i < params.tensors().size(); ++i) {
    archive.emplace_back(params.tensor_name(i), Tensor::from_matrix(params.tensors()[i]));
  }
  return archive;
}

RerankerParams params_from_archive(const TensorArchive& archive) {
  if (archive.empty() || archive[0].first != "config") {
    throw Error(ErrorCode::SchemaViolation, "checkpoint must start with a config entry");
  }
  RerankerParams params = RerankerParams::zeros(parse_config(archive[0].second));
  auto& tensors = params.tensors();
  if (archive.size() != tensors.size() + 1) {
    throw Error(ErrorCode::SchemaViolation, "checkpoint has " + std::to_string(archive.size() - 1) +
                                                " tensors, expected " + std::to_string(tensors.size()));
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& [name, tensor] = archive[i + 1];
    if (name != params.tensor_name(i)) {
      throw Error(ErrorCode::SchemaViolation, "unexpected tensor '" + name + "', expected '" +
                                                  params.tensor_name(i) + "'");
    }
    Matrix m = tensor.to_matrix();
    if (!m.same_shape(tensors[i])) throw Error(ErrorCode::ShapeMismatch, "tensor '" + name + "' has wrong shape");
    tensors[i] = std::move(m);
  }
  return params;
}

void save_checkpoint(const std::filesystem::path& path, const RerankerParams& params) {
  write_archive(path, checkpoint_archive(params));
}

RerankerParams load_checkpoint(const std::filesystem::path& path) {
  return params_from_archive(read_archive(path));
}

RerankerParams round_to_f32(const RerankerParams& params) {
  RerankerParams out = params;
  for (auto& t : out.tensors()) {
    for (double& v : t.values()) v = static_cast<double>(static_cast<float>(v));
  }
  return out;
}

}  // namespace epiguide
