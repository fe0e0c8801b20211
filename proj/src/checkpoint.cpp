#include "critgen/checkpoint.hpp"

#include <fstream>
#include <optional>
#include <sstream>

#include <json.hpp>

#include "critgen/errors.hpp"

namespace critgen {

using json = nlohmann::json;

const char* to_string(ModelKind kind) {
  return kind == ModelKind::prior ? "prior" : "generator";
}

namespace {

json spec_to_json(const MlpSpec& spec) {
  return {{"input_dim", spec.input_dim},
          {"hidden_dims", spec.hidden_dims},
          {"output_dim", spec.output_dim},
          {"activation", to_string(spec.activation)}};
}

MlpSpec spec_from_json(const json& j) {
  return MlpSpec{j.at("input_dim").get<std::size_t>(),
                 j.at("hidden_dims").get<std::vector<std::size_t>>(),
                 j.at("output_dim").get<std::size_t>(),
                 activation_from_string(j.at("activation").get<std::string>())};
}

[[noreturn]] void dimension_error(const std::string& what) {
  throw CheckpointError(CheckpointError::Kind::dimension, "checkpoint: " + what);
}

}  // namespace

std::string checkpoint_to_string(const FlowModel& model, const CheckpointMeta& meta) {
  const auto& arch = model.architecture();
  json layers = json::array();
  for (const auto& layer : model.layers()) {
    layers.push_back({{"mask", layer.mask},
                      {"scale_net", spec_to_json(layer.scale_net)},
                      {"shift_net", spec_to_json(layer.shift_net)},
                      {"scale_offset", layer.scale_offset},
                      {"shift_offset", layer.shift_offset}});
  }
  json conditions = json::array();
  for (const auto& c : meta.conditions) conditions.push_back({{"id", c.id}, {"values", c.values}});

  // nlohmann prints doubles in shortest round-trip form, so reloading is
  // bit-exact.
  json doc = {
      {"format", "critgen-flow"},
      {"format_version", kCheckpointFormatVersion},
      {"kind", to_string(meta.kind)},
      {"dim", arch.dim},
      {"cond_dim", arch.cond_dim},
      {"num_layers", arch.num_layers},
      {"hidden_dims", arch.hidden_dims},
      {"activation", to_string(arch.activation)},
      {"scale_bound", arch.scale_bound},
      {"layers", layers},
      {"normalization", {{"lo", model.normalizer().lo}, {"hi", model.normalizer().hi}}},
      {"training_seed", meta.training_seed},
      {"metadata", {{"epochs", meta.epochs}, {"final_loss", meta.final_loss}}},
      {"conditions", conditions},
      {"params", model.params().values()},
  };
  return doc.dump(1) + "\n";
}

Checkpoint checkpoint_from_string(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw CheckpointError(CheckpointError::Kind::malformed,
                          std::string("checkpoint: malformed document: ") + e.what());
  }
  try {
    if (!doc.is_object() || doc.value("format", "") != "critgen-flow") {
      throw CheckpointError(CheckpointError::Kind::malformed,
                            "checkpoint: not a critgen-flow document");
    }
    const int version = doc.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion) {
      throw CheckpointError(CheckpointError::Kind::version,
                            "checkpoint: format_version " + std::to_string(version) +
                                " is not supported (this build reads version " +
                                std::to_string(kCheckpointFormatVersion) + ")");
    }
    FlowArchitecture arch;
    arch.dim = doc.at("dim").get<std::size_t>();
    arch.cond_dim = doc.at("cond_dim").get<std::size_t>();
    arch.num_layers = doc.at("num_layers").get<std::size_t>();
    arch.hidden_dims = doc.at("hidden_dims").get<std::vector<std::size_t>>();
    arch.activation = activation_from_string(doc.at("activation").get<std::string>());
    arch.scale_bound = doc.at("scale_bound").get<double>();

    std::optional<FlowModel> model;
    try {
      model.emplace(arch);
    } catch (const ContractError& e) {
      dimension_error(e.what());
    }

    const auto& layers = doc.at("layers");
    if (!layers.is_array() || layers.size() != arch.num_layers) {
      dimension_error("layer count does not match num_layers");
    }
    for (std::size_t l = 0; l < arch.num_layers; ++l) {
      const auto& jl = layers[l];
      const auto& expect = model->layers()[l];
      if (jl.at("mask").get<std::vector<std::uint8_t>>() != expect.mask ||
          !(spec_from_json(jl.at("scale_net")) == expect.scale_net) ||
          !(spec_from_json(jl.at("shift_net")) == expect.shift_net) ||
          jl.at("scale_offset").get<std::size_t>() != expect.scale_offset ||
          jl.at("shift_offset").get<std::size_t>() != expect.shift_offset) {
        dimension_error("layer " + std::to_string(l) + " is inconsistent with dim " +
                        std::to_string(arch.dim) + " / cond_dim " +
                        std::to_string(arch.cond_dim));
      }
    }

    auto params = doc.at("params").get<std::vector<double>>();
    if (params.size() != model->params().size()) {
      dimension_error("parameter count " + std::to_string(params.size()) + " != expected " +
                      std::to_string(model->params().size()));
    }
    model->params().values() = std::move(params);

    Normalizer norm{doc.at("normalization").at("lo").get<std::vector<double>>(),
                    doc.at("normalization").at("hi").get<std::vector<double>>()};
    if (norm.dim() != arch.dim) dimension_error("normalization length != dim");
    try {
      norm.validate();
    } catch (const ContractError& e) {
      dimension_error(e.what());
    }
    model->normalizer() = std::move(norm);

    CheckpointMeta meta;
    const auto kind = doc.at("kind").get<std::string>();
    if (kind == "prior") {
      meta.kind = ModelKind::prior;
    } else if (kind == "generator") {
      meta.kind = ModelKind::generator;
    } else {
      throw CheckpointError(CheckpointError::Kind::malformed, "checkpoint: unknown kind " + kind);
    }
    meta.training_seed = doc.at("training_seed").get<std::uint64_t>();
    meta.epochs = doc.at("metadata").at("epochs").get<std::size_t>();
    meta.final_loss = doc.at("metadata").at("final_loss").get<double>();
    for (const auto& c : doc.at("conditions")) {
      NamedCondition nc{c.at("id").get<std::string>(), c.at("values").get<std::vector<double>>()};
      if (nc.values.size() != arch.cond_dim) {
        dimension_error("condition '" + nc.id + "' has length " + std::to_string(nc.values.size()) +
                        ", cond_dim is " + std::to_string(arch.cond_dim));
      }
      meta.conditions.push_back(std::move(nc));
    }
    return Checkpoint{std::move(*model), std::move(meta)};
  } catch (const json::exception& e) {
    throw CheckpointError(CheckpointError::Kind::malformed,
                          std::string("checkpoint: malformed document: ") + e.what());
  }
}

void save_checkpoint(const FlowModel& model, const CheckpointMeta& meta, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError(CheckpointError::Kind::io, "checkpoint: cannot write " + path);
  out << checkpoint_to_string(model, meta);
  if (!out) throw CheckpointError(CheckpointError::Kind::io, "checkpoint: write failed " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::io, "checkpoint: cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return checkpoint_from_string(ss.str());
}

}  // namespace critgen
