// SPDX-License-Identifier: Apache-2.0
/**
 * @file   test_data.cpp
 * @brief  Vocabulary, batching and permuted-image ingestion.
 */
#include "zoneout/data.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

namespace zoneout {
namespace {

std::filesystem::path temp_file(const std::string &name, const std::string &content) {
  const auto path = std::filesystem::temp_directory_path() / ("zoneout_test_" + name);
  std::ofstream(path, std::ios::binary) << content;
  return path;
}

TEST(Vocab, CharacterLevel) {
  const TextCorpus c = encode_text("abab", TextLevel::character);
  EXPECT_EQ(c.vocab.size(), 2u);
  EXPECT_EQ(c.vocab.symbol(0), "a");
  EXPECT_EQ(c.codes, (std::vector<int>{0, 1, 0, 1}));
}

TEST(Vocab, WordLevel) {
  const TextCorpus c = encode_text("a b a", TextLevel::word);
  EXPECT_EQ(c.vocab.size(), 2u);
  EXPECT_EQ(c.codes, (std::vector<int>{0, 1, 0}));
}

TEST(Vocab, FirstOccurrenceOrder) {
  const TextCorpus c = encode_text("zebra", TextLevel::character);
  EXPECT_EQ(c.vocab.decode(std::vector<int>{0, 1, 2, 3, 4}), "zebra");
}

TEST(Vocab, Utf8CodePoints) {
  const TextCorpus c = encode_text("h\xC3\xA9h\xE2\x80\x94", TextLevel::character);
  EXPECT_EQ(c.vocab.size(), 3u);
  EXPECT_EQ(c.codes.size(), 4u);
  EXPECT_THROW(encode_text("\xC3", TextLevel::character), DataError);
}

TEST(Vocab, RoundTripReproducesSymbols) {
  const std::string text = "It is not down in any map; true places never are.\n";
  const TextCorpus c = encode_text(text, TextLevel::character);
  EXPECT_EQ(c.vocab.decode(c.codes), text);
  const TextCorpus w = encode_text(text, TextLevel::word);
  EXPECT_EQ(w.vocab.encode(w.vocab.decode(w.codes)), w.codes);
}

TEST(Vocab, UnknownSymbol) {
  const TextCorpus c = encode_text("ab", TextLevel::character);
  EXPECT_THROW(c.vocab.encode("abc"), DataError);
}

TEST(LoadText, MissingAndEmptyFiles) {
  EXPECT_THROW(load_text("/nonexistent/corpus.txt", TextLevel::character), DataError);
  EXPECT_THROW(load_text(temp_file("empty.txt", ""), TextLevel::character), DataError);
  EXPECT_THROW(load_text(temp_file("blank.txt", "  \n "), TextLevel::word), DataError);
  const TextCorpus c = load_text(temp_file("abab.txt", "abab"), TextLevel::character);
  EXPECT_EQ(c.codes.size(), 4u);
}

std::vector<int> iota_codes(int n) {
  std::vector<int> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), 0);
  return v;
}

TEST(Batcher, NonOverlappingWindows) {
  SequenceBatcher b(iota_codes(10), 3, 1);
  ASSERT_EQ(b.size(), 3u);
  for (std::size_t k = 0; k < 3; ++k) {
    const TextBatch w = b[k];
    for (int t = 0; t < 3; ++t) {
      EXPECT_EQ(w.inputs[static_cast<std::size_t>(t)][0], static_cast<int>(3 * k) + t);
      EXPECT_EQ(w.targets[static_cast<std::size_t>(t)][0], static_cast<int>(3 * k) + t + 1);
    }
  }
  EXPECT_TRUE(b[0].stream_start);
  EXPECT_FALSE(b[1].stream_start);
  EXPECT_THROW(b[3], std::out_of_range);
}

TEST(Batcher, OverlappingStrideOne) {
  SequenceBatcher b(iota_codes(10), 3, 1, SequenceBatcher::Overlap::overlapping, 1);
  ASSERT_EQ(b.size(), 7u);
  for (std::size_t k = 0; k < b.size(); ++k) {
    EXPECT_EQ(b[k].inputs[0][0], static_cast<int>(k));
    EXPECT_TRUE(b[k].stream_start);
  }
}

TEST(Batcher, OverlapStrideDefaultsToHalfLength) {
  SequenceBatcher b(iota_codes(41), 10, 1, SequenceBatcher::Overlap::overlapping);
  EXPECT_EQ(b[1].inputs[0][0], 5);
}

TEST(Batcher, TooShortCorpus) {
  EXPECT_THROW(SequenceBatcher(iota_codes(3), 3, 1), DataError);
  EXPECT_THROW(SequenceBatcher(iota_codes(3), 5, 1), DataError);
  EXPECT_THROW(SequenceBatcher(iota_codes(20), 5, 8), DataError);
}

TEST(Batcher, ContiguousStreamsContinueAcrossBatches) {
  SequenceBatcher b(iota_codes(101), 5, 4); // streams of 25
  for (std::size_t k = 0; k + 1 < b.size(); ++k)
    for (int s = 0; s < 4; ++s)
      EXPECT_EQ(b[k + 1].inputs[0][static_cast<std::size_t>(s)],
                b[k].targets[4][static_cast<std::size_t>(s)]);
}

TEST(Batcher, EverySymbolIsATargetOncePerEpoch) {
  for (int n : {50, 97, 128}) {
    for (Index batch : {1, 2, 3}) {
      const Index seq = 4;
      SequenceBatcher b(iota_codes(n), seq, batch);
      std::multiset<int> seen;
      for (std::size_t k = 0; k < b.size(); ++k)
        for (const auto &row : b[k].targets)
          seen.insert(row.begin(), row.end());
      for (int v : seen)
        EXPECT_EQ(seen.count(v), 1u);
      // Unused symbols: the tail of each stream plus the remainder of the split.
      const Index stream = (n - 1) / batch;
      const Index used = batch * (stream / seq) * seq;
      EXPECT_EQ(static_cast<Index>(seen.size()), used);
      EXPECT_LE((n - 1) - used, batch * (seq - 1) + (batch - 1));
    }
  }
}

// ---------------------------------------------------------------------------

std::string mnist_row(int label, int fill) {
  std::string s = std::to_string(label);
  for (int k = 0; k < 784; ++k)
    s += "," + std::to_string((k * 7 + fill) % 256);
  return s + "\n";
}

TEST(Mnist, LoadsCsv) {
  const auto path = temp_file("mnist.csv", mnist_row(3, 0) + mnist_row(9, 5));
  const RawImages raw = load_mnist_csv(path);
  ASSERT_EQ(raw.labels, (std::vector<int>{3, 9}));
  EXPECT_EQ(raw.pixels.cols(), 784);
  EXPECT_EQ(raw.pixels(1, 1), 12.0);
  EXPECT_EQ(load_mnist_csv(path, 1).labels.size(), 1u);
}

TEST(Mnist, RejectsMalformedRows) {
  EXPECT_THROW(load_mnist_csv(temp_file("short.csv", "3,1,2,3\n")), DataError);
  EXPECT_THROW(load_mnist_csv(temp_file("label.csv", mnist_row(10, 0))), DataError);
  std::string bad = mnist_row(1, 0);
  bad.replace(bad.find(',') + 1, 1, "x");
  EXPECT_THROW(load_mnist_csv(temp_file("bad.csv", bad)), DataError);
  EXPECT_THROW(load_mnist_csv("/nonexistent.csv"), DataError);
}

TEST(Mnist, IdentityPermutationKeepsRowMajorOrder) {
  const RawImages raw = load_mnist_csv(temp_file("m1.csv", mnist_row(4, 1)));
  const PermutedImageSet s = make_pmnist(raw, std::nullopt);
  for (Index t = 0; t < 784; ++t)
    EXPECT_EQ(s.pixels(0, t), raw.pixels(0, t) / 255.0);
}

TEST(Mnist, PermutationIsABijectionAndInvertible) {
  const std::vector<int> p = make_permutation(196, 1234);
  std::vector<int> sorted = p;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, [] {
    std::vector<int> v(196);
    std::iota(v.begin(), v.end(), 0);
    return v;
  }());
  Matrix img(2, 196);
  for (Index k = 0; k < img.size(); ++k)
    img.data()[k] = static_cast<double>(k);
  const Matrix back = apply_permutation(apply_permutation(img, p), invert_permutation(p));
  EXPECT_TRUE(back == img);
  EXPECT_EQ(make_permutation(196, 1234), p);
  EXPECT_NE(make_permutation(196, 1235), p);
}

TEST(Mnist, SamePermutationForEverySplit) {
  const RawImages raw = make_toy_digits(30, 4, 3, 0.1, 1);
  const PermutedImageSet all = make_pmnist(raw, 77);
  const PermutedImageSet a = subset(all, 0, 10), b = subset(all, 10, 30);
  EXPECT_EQ(a.permutation, b.permutation);
}

TEST(Mnist, DownsampleMeanPools) {
  Matrix img(1, 16);
  for (Index k = 0; k < 16; ++k)
    img(0, k) = static_cast<double>(k);
  const Matrix d = downsample(img, 4, 2);
  // Blocks: {0,1,4,5}, {2,3,6,7}, {8,9,12,13}, {10,11,14,15}.
  EXPECT_EQ(d, (Matrix{{2.5, 4.5, 10.5, 12.5}}));
  EXPECT_THROW(downsample(img, 4, 3), std::invalid_argument);
}

TEST(ToyDigits, BalancedAndInRange) {
  const RawImages raw = make_toy_digits(100, 8, 10, 0.3, 5);
  EXPECT_EQ(raw.pixels.cols(), 64);
  EXPECT_GE(raw.pixels.minCoeff(), 0.0);
  EXPECT_LE(raw.pixels.maxCoeff(), 1.0);
  std::vector<int> counts(10, 0);
  for (int l : raw.labels)
    ++counts[static_cast<std::size_t>(l)];
  for (int c : counts)
    EXPECT_EQ(c, 10);
  EXPECT_TRUE(make_toy_digits(100, 8, 10, 0.3, 5).pixels == raw.pixels);
}

} // namespace
} // namespace zoneout
