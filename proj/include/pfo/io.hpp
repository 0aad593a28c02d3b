#pragma once

#include "pfo/density.hpp"
#include "pfo/dynamics.hpp"
#include "pfo/flowmap.hpp"

#include <string>
#include <vector>

namespace pfo {

// JSON-lines dataset container with a header record carrying
// (n, m, p, schema version, root seed).
void save_dataset(const std::string& path, const std::vector<TrajectoryPair>& pairs, int n, int m,
                  int p, std::uint64_t root_seed);
std::vector<TrajectoryPair> load_dataset(const std::string& path, int* n = nullptr,
                                         int* m = nullptr, int* p = nullptr,
                                         std::uint64_t* root_seed = nullptr);

void save_ensemble(const std::string& path, const ParticleEnsemble& ensemble);
ParticleEnsemble load_ensemble(const std::string& path);

struct Checkpoint {
  FlowMapModel model;
  MetricModel metric;
  double schedule_gamma0 = 0.0;
  std::string config_hash;
  std::vector<TrainHistoryEntry> history;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Measurement log: JSON lines of {"t": ..., "y": [...]}.
void save_measurements(const std::string& path,
                       const std::vector<std::pair<double, Vec>>& history);
std::vector<std::pair<double, Vec>> load_measurements(const std::string& path);

void write_text_file(const std::string& path, const std::string& content);

// Canonical config hash used in every emitted report.
std::string config_hash_of(const std::string& canonical_json);

}  // namespace pfo
