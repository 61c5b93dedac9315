// Copyright (c) 2026 the stitchflow authors
// SPDX-License-Identifier: Apache-2.0
//
// Low-rank adapter construction, merging, and persistence. Adapters perturb
// targeted denoiser linears by (alpha / rank) * B * A; B starts at zero so a
// fresh adapter is exactly neutral.

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "stitchflow/checkpoint.hpp"
#include "stitchflow/denoiser.hpp"
#include "stitchflow/errors.hpp"
#include "stitchflow/rng.hpp"

namespace stitchflow {

namespace lora_detail {

/// Resolves a target name ("blocks.2.attn.q", "mlp.fc1", ...) to the linear
/// it addresses. Throws UnknownTarget for names the model does not have.
template <typename S>
const LinearP<S>* find_linear(const DenoiserParams<S>& params, const std::string& target) {
  const LinearP<S>* found = nullptr;
  const auto probe = [&](const std::string& name, const LinearP<S>& lin) {
    if (name == target) found = &lin;
  };
  probe("in_proj", params.in_proj);
  probe("time_proj", params.time_proj);
  probe("out_proj", params.out_proj);
  for (std::size_t i = 0; i < params.blocks.size(); ++i) {
    const std::string base = "blocks." + std::to_string(i) + ".";
    probe(base + "attn.q", params.blocks[i].wq);
    probe(base + "attn.k", params.blocks[i].wk);
    probe(base + "attn.v", params.blocks[i].wv);
    probe(base + "attn.o", params.blocks[i].wo);
    probe(base + "mlp.fc1", params.blocks[i].fc1);
    probe(base + "mlp.fc2", params.blocks[i].fc2);
  }
  if (found == nullptr) {
    throw UnknownTarget("no linear layer named '" + target + "' in this model");
  }
  return found;
}

template <typename S>
LinearP<S>* find_linear(DenoiserParams<S>& params, const std::string& target) {
  return const_cast<LinearP<S>*>(
      find_linear(static_cast<const DenoiserParams<S>&>(params), target));
}

}  // namespace lora_detail

/// Builds a fresh adapter over `targets`. A is seeded small-random, B zero,
/// so attaching the result leaves every forward pass unchanged.
template <typename S>
LoRAAdapter<S> inject(const DenoiserParams<S>& params, const std::vector<std::string>& targets,
                      int rank, double alpha, std::uint64_t seed) {
  require(rank >= 1, "inject: rank must be >= 1");
  require(!targets.empty(), "inject: need at least one target");
  LoRAAdapter<S> adapter;
  adapter.rank = rank;
  adapter.alpha = alpha;
  Rng rng(Rng::mix(seed, 0x6c6f7261ULL));
  for (const std::string& target : targets) {
    const LinearP<S>* lin = lora_detail::find_linear(params, target);
    const Eigen::Index d_out = lin->w.rows(), d_in = lin->w.cols();
    if (rank > std::min(d_out, d_in)) {
      throw RankTooLarge("rank " + std::to_string(rank) + " exceeds min dim of '" + target +
                         "' (" + std::to_string(std::min(d_out, d_in)) + ")");
    }
    LoRAEntry<S> entry;
    entry.a.resize(rank, d_in);
    const double a_std = 1.0 / std::sqrt(static_cast<double>(rank));
    for (Eigen::Index j = 0; j < d_in; ++j) {
      for (Eigen::Index i = 0; i < rank; ++i) {
        entry.a(i, j) = static_cast<S>(rng.normal() * a_std);
      }
    }
    entry.b = Mat<S>::Zero(d_out, rank);
    adapter.entries.emplace(target, std::move(entry));
  }
  return adapter;
}

/// Same-structure adapter with all entries zeroed (gradient accumulator).
template <typename S>
LoRAAdapter<S> zero_like(const LoRAAdapter<S>& adapter) {
  LoRAAdapter<S> out;
  out.rank = adapter.rank;
  out.alpha = adapter.alpha;
  for (const auto& [target, entry] : adapter.entries) {
    out.entries.emplace(target,
                        LoRAEntry<S>{Mat<S>::Zero(entry.a.rows(), entry.a.cols()),
                                     Mat<S>::Zero(entry.b.rows(), entry.b.cols())});
  }
  return out;
}

/// Verifies an adapter's shapes against a model. Throws UnknownTarget for
/// absent layers and ConfigMismatch for dimension disagreements.
template <typename S>
void validate_adapter(const DenoiserParams<S>& params, const LoRAAdapter<S>& adapter) {
  require(adapter.rank >= 1, "adapter rank must be >= 1");
  for (const auto& [target, entry] : adapter.entries) {
    const LinearP<S>* lin = lora_detail::find_linear(params, target);
    if (entry.a.rows() != adapter.rank || entry.b.cols() != adapter.rank ||
        entry.a.cols() != lin->w.cols() || entry.b.rows() != lin->w.rows()) {
      throw ConfigMismatch("adapter entry '" + target + "' has shape (" +
                           std::to_string(entry.b.rows()) + "x" + std::to_string(adapter.rank) +
                           ")(" + std::to_string(adapter.rank) + "x" +
                           std::to_string(entry.a.cols()) + ") but the layer is " +
                           std::to_string(lin->w.rows()) + "x" + std::to_string(lin->w.cols()));
    }
  }
}

/// Folds the adapter into a copy of the base weights. Merging twice applies
/// the delta twice — the adapter does not track application.
template <typename S>
DenoiserParams<S> merge(const DenoiserParams<S>& params, const LoRAAdapter<S>& adapter) {
  DenoiserParams<S> merged = params;
  for (const auto& [target, entry] : adapter.entries) {
    LinearP<S>* lin = lora_detail::find_linear(merged, target);
    lin->w += adapter.scale() * (entry.b * entry.a);
  }
  return merged;
}

inline void save_adapter(const std::filesystem::path& path, const LoRAAdapter<float>& adapter) {
  Checkpoint ckpt;
  ckpt.metadata["kind"] = "lora";
  ckpt.metadata["rank"] = adapter.rank;
  ckpt.metadata["alpha"] = adapter.alpha;
  std::vector<std::string> targets;
  for (const auto& [target, entry] : adapter.entries) {
    targets.push_back(target);
    ckpt.put_matrix(target + ".a", entry.a);
    ckpt.put_matrix(target + ".b", entry.b);
  }
  ckpt.metadata["targets"] = targets;
  save_checkpoint(path, ckpt);
}

inline LoRAAdapter<float> load_adapter(const std::filesystem::path& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  expect_metadata<std::string>(ckpt, "kind", "lora");
  LoRAAdapter<float> adapter;
  try {
    adapter.rank = ckpt.metadata.at("rank").get<int>();
    adapter.alpha = ckpt.metadata.at("alpha").get<double>();
    for (const auto& target : ckpt.metadata.at("targets").get<std::vector<std::string>>()) {
      LoRAEntry<float> entry;
      entry.a = ckpt.matrix<float>(target + ".a");
      entry.b = ckpt.matrix<float>(target + ".b");
      adapter.entries.emplace(target, std::move(entry));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint(std::string("adapter metadata incomplete: ") + e.what());
  }
  return adapter;
}

/// Loads and validates against a concrete model in one step.
inline LoRAAdapter<float> load_adapter(const std::filesystem::path& path,
                                       const DenoiserParams<float>& params) {
  LoRAAdapter<float> adapter = load_adapter(path);
  validate_adapter(params, adapter);
  return adapter;
}

}  // namespace stitchflow
