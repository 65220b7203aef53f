// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dvp/prompt.hpp"

namespace dvp {

/// Synthetic multimodal classification task with a planted composition
/// depth.
///
/// Text: position 0 is [CLS] (id 1); composition_depth + 1 symbol tokens
/// (ids 2..2+C) sit at random positions, everything else is pad (id 0).
/// The sum of the symbol values mod C names the target prototype.
///
/// Image: every one of the C prototypes is written into its own random row
/// (1..N-1), paired with a class code in the second half of the feature
/// vector. Each prototype's class is drawn uniformly and independently per
/// example, so the marginal label distribution is uniform. Row 0 is the
/// mean of the other rows. Gaussian noise of scale noise_sigma is added to
/// every row before the mean is taken.
///
/// The label is the class paired with the target prototype.
struct SyntheticTaskSpec {
  std::size_t visual_len = 32;    // N
  std::size_t visual_width = 32;  // d_v, even
  std::size_t text_len = 8;       // L
  std::size_t vocab = 64;
  std::size_t prototypes = 8;     // C
  std::size_t num_classes = 8;
  std::size_t composition_depth = 1;
  double noise_sigma = 0.1;
  std::size_t train_size = 4000;
  std::size_t val_size = 1000;
  std::size_t test_size = 1000;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const SyntheticTaskSpec&, const SyntheticTaskSpec&) = default;
};

inline constexpr int kPadToken = 0;
inline constexpr int kClsToken = 1;
inline constexpr int kFirstSymbolToken = 2;

struct Example {
  std::vector<int> tokens;  // length L
  Tensor visual;            // [N x d_v]
  int label = 0;
};

struct TaskDataset {
  std::size_t visual_len = 0;
  std::size_t visual_width = 0;
  std::size_t text_len = 0;
  std::size_t num_classes = 0;
  Tensor prototypes;   // [C x d_v/2], unit rows
  Tensor class_codes;  // [num_classes x d_v/2], unit rows
  std::vector<Example> train;
  std::vector<Example> val;
  std::vector<Example> test;
};

/// Pure function of the spec (including its seed).
TaskDataset gen_synthetic(const SyntheticTaskSpec& spec);

/// Stacks examples[indices] into a model batch.
Batch make_batch(std::span<const Example> examples, std::span<const std::size_t> indices);
Batch make_batch(std::span<const Example> examples, std::size_t begin, std::size_t count);

struct VisualFeatures {
  std::size_t visual_len = 0;
  std::size_t visual_width = 0;
  std::vector<Tensor> items;  // one [N x d_v] matrix per example
};

/// Binary feature file: "DVPF", u32 version (1), u32 count, u32 N, u32 d_v,
/// then count*N*d_v little-endian float32 values.
void write_features(const std::filesystem::path& path, std::span<const Example> examples);
VisualFeatures load_features(const std::filesystem::path& path);

/// Sibling CSV: example_id,label,token_0..token_{L-1}
void write_labels_csv(const std::filesystem::path& path, std::span<const Example> examples);
/// Joins a feature file with its label CSV.
std::vector<Example> load_examples(const std::filesystem::path& features,
                                   const std::filesystem::path& labels_csv);

enum class LossKind { SoftmaxCrossEntropy, BinaryCrossEntropy };

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
  std::size_t correct = 0;
  std::size_t count = 0;
};

/// Top-1 accuracy and mean loss over the examples in order, in batches of
/// `batch_size`. Throws on an empty split.
EvalResult evaluate(Model& model, const PromptSpec& spec, std::span<const Example> split,
                    std::size_t batch_size = 64,
                    LossKind loss = LossKind::SoftmaxCrossEntropy);

/// Row-wise argmax of a logits matrix.
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace dvp
