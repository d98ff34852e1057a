// SPDX-License-Identifier: Apache-2.0
/**
 * @file   data.hpp
 * @brief  Text corpora, sequence batching and permuted pixel-sequence images.
 */
#pragma once

#include "zoneout/rng.hpp"
#include "zoneout/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace zoneout {

/// File missing, unreadable or malformed.
class DataError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

enum class TextLevel { character, word };

/// Symbols in order of first occurrence. Characters are UTF-8 code points.
class Vocab {
public:
  explicit Vocab(TextLevel level) : level_(level) {}

  TextLevel level() const { return level_; }
  std::size_t size() const { return symbols_.size(); }
  const std::string &symbol(int id) const;
  std::optional<int> find(std::string_view symbol) const;
  /// Id of `symbol`, adding it if new.
  int intern(std::string_view symbol);

  /// Splits text into symbols for this vocabulary's level.
  static std::vector<std::string> tokenize(std::string_view text,
                                           TextLevel level);
  /// Encodes with existing symbols only; throws DataError on unknown ones.
  std::vector<int> encode(std::string_view text) const;
  /// Characters are concatenated, words joined by single spaces.
  std::string decode(std::span<const int> ids) const;

private:
  TextLevel level_;
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, int> index_;
};

struct TextCorpus {
  Vocab vocab;
  std::vector<int> codes;
};

/// Builds the vocabulary from `text` itself.
TextCorpus encode_text(std::string_view text, TextLevel level);
TextCorpus load_text(const std::filesystem::path &path, TextLevel level);
std::string read_file(const std::filesystem::path &path);

/// Inputs and next-symbol targets, [t][b].
struct TextBatch {
  std::vector<std::vector<int>> inputs;
  std::vector<std::vector<int>> targets;
  /// First window of its stream (state should start from zero).
  bool stream_start = false;
};

/// Cuts the corpus into `batch_size` contiguous streams and walks them in
/// lockstep, so batch k+1 continues where batch k stopped in every stream.
/// Non-overlapping windows advance by seq_len; overlapping ones by `stride`.
class SequenceBatcher {
public:
  enum class Overlap { non_overlapping, overlapping };

  SequenceBatcher(std::vector<int> codes, Index seq_len, Index batch_size,
                  Overlap overlap = Overlap::non_overlapping, Index stride = 0);

  std::size_t size() const { return windows_; }
  TextBatch operator[](std::size_t k) const;
  Overlap overlap() const { return overlap_; }
  Index seq_len() const { return seq_len_; }
  Index batch_size() const { return batch_; }

private:
  std::vector<int> codes_;
  Index seq_len_;
  Index batch_;
  Overlap overlap_;
  Index stride_;
  Index stream_len_ = 0;
  std::size_t windows_ = 0;
};

/// Pixel sequences in [0, 1]; row k of `pixels` is image k, already
/// permuted.
struct PermutedImageSet {
  Matrix pixels;
  std::vector<int> labels;
  std::vector<int> permutation; // position t shows source pixel permutation[t]
  Index side = 28;
};

struct RawImages {
  Matrix pixels; // N x 784, raw 0..255
  std::vector<int> labels;
  Index side = 28;
};

/// `label,p0,...,p783` per line, pixels 0..255.
RawImages load_mnist_csv(const std::filesystem::path &path,
                         std::size_t limit = 0);

/// Mean-pools side x side images by `factor` (side must divide evenly).
Matrix downsample(const Matrix &images, Index side, Index factor);

std::vector<int> make_permutation(Index length, std::uint64_t seed);
std::vector<int> invert_permutation(std::span<const int> permutation);
/// out[:, t] = images[:, permutation[t]].
Matrix apply_permutation(const Matrix &images, std::span<const int> permutation);

/// Scales to [0, 1], optionally downsamples, flattens row-major and applies a
/// fixed seeded permutation (identity when `permutation_seed` is empty).
PermutedImageSet make_pmnist(const RawImages &raw,
                             std::optional<std::uint64_t> permutation_seed,
                             Index downsample_factor = 1);
PermutedImageSet load_pmnist(const std::filesystem::path &path,
                             std::optional<std::uint64_t> permutation_seed,
                             Index downsample_factor = 1,
                             std::size_t limit = 0);

/// Synthetic stand-in for digit images: `classes` random side x side
/// prototypes plus Gaussian pixel noise, clipped to [0, 1]. Labels are
/// balanced round-robin, then shuffled.
RawImages make_toy_digits(std::size_t count, Index side, int classes,
                          double noise, std::uint64_t seed);

/// Rows [begin, end) of an image set.
PermutedImageSet subset(const PermutedImageSet &set, Index begin, Index end);

} // namespace zoneout
