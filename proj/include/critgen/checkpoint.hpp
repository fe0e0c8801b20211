#pragma once

// Versioned JSON checkpoint that fully describes a FlowModel: architecture,
// masks, conditioner net specs, parameters, and the physical normalization.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "critgen/flow.hpp"

namespace critgen {

inline constexpr int kCheckpointFormatVersion = 1;

enum class ModelKind { prior, generator };

const char* to_string(ModelKind kind);

struct NamedCondition {
  std::string id;
  std::vector<double> values;
};

struct CheckpointMeta {
  ModelKind kind = ModelKind::generator;
  std::uint64_t training_seed = 0;
  std::size_t epochs = 0;
  double final_loss = 0.0;
  // Route catalog the generator was trained against; empty for priors.
  std::vector<NamedCondition> conditions;
};

struct Checkpoint {
  FlowModel model;
  CheckpointMeta meta;
};

std::string checkpoint_to_string(const FlowModel& model, const CheckpointMeta& meta);
Checkpoint checkpoint_from_string(const std::string& text);

void save_checkpoint(const FlowModel& model, const CheckpointMeta& meta, const std::string& path);
// Throws CheckpointError with kind io / malformed / version / dimension.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace critgen
