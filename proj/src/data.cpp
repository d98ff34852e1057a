// SPDX-License-Identifier: Apache-2.0
#include "zoneout/data.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <sstream>

namespace zoneout {

const std::string &Vocab::symbol(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= symbols_.size())
    throw std::out_of_range("vocab id " + std::to_string(id) + " out of range");
  return symbols_[static_cast<std::size_t>(id)];
}

std::optional<int> Vocab::find(std::string_view symbol) const {
  auto it = index_.find(std::string(symbol));
  if (it == index_.end())
    return std::nullopt;
  return it->second;
}

int Vocab::intern(std::string_view symbol) {
  auto [it, inserted] =
    index_.try_emplace(std::string(symbol), static_cast<int>(symbols_.size()));
  if (inserted)
    symbols_.emplace_back(symbol);
  return it->second;
}

namespace {

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80)
    return 1;
  if ((lead >> 5) == 0x6)
    return 2;
  if ((lead >> 4) == 0xE)
    return 3;
  if ((lead >> 3) == 0x1E)
    return 4;
  return 0;
}

bool is_space(char c) {
  return c == ' ' || c == '\n' || c == '\t' || c == '\r' || c == '\f' ||
         c == '\v';
}

} // namespace

std::vector<std::string> Vocab::tokenize(std::string_view text,
                                         TextLevel level) {
  std::vector<std::string> out;
  if (level == TextLevel::character) {
    for (std::size_t k = 0; k < text.size();) {
      const std::size_t n = utf8_length(static_cast<unsigned char>(text[k]));
      if (n == 0 || k + n > text.size())
        throw DataError("invalid UTF-8 at byte " + std::to_string(k));
      for (std::size_t j = 1; j < n; ++j)
        if ((static_cast<unsigned char>(text[k + j]) >> 6) != 0x2)
          throw DataError("invalid UTF-8 at byte " + std::to_string(k + j));
      out.emplace_back(text.substr(k, n));
      k += n;
    }
  } else {
    std::size_t k = 0;
    while (k < text.size()) {
      while (k < text.size() && is_space(text[k]))
        ++k;
      std::size_t e = k;
      while (e < text.size() && !is_space(text[e]))
        ++e;
      if (e > k)
        out.emplace_back(text.substr(k, e - k));
      k = e;
    }
  }
  return out;
}

std::vector<int> Vocab::encode(std::string_view text) const {
  std::vector<int> out;
  for (const auto &s : tokenize(text, level_)) {
    auto id = find(s);
    if (!id)
      throw DataError("symbol '" + s + "' not in vocabulary");
    out.push_back(*id);
  }
  return out;
}

std::string Vocab::decode(std::span<const int> ids) const {
  std::string out;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (level_ == TextLevel::word && k > 0)
      out.push_back(' ');
    out += symbol(ids[k]);
  }
  return out;
}

TextCorpus encode_text(std::string_view text, TextLevel level) {
  TextCorpus c{Vocab(level), {}};
  for (const auto &s : Vocab::tokenize(text, level))
    c.codes.push_back(c.vocab.intern(s));
  if (c.codes.empty())
    throw DataError("empty corpus");
  return c;
}

std::string read_file(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw DataError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

TextCorpus load_text(const std::filesystem::path &path, TextLevel level) {
  const std::string text = read_file(path);
  try {
    return encode_text(text, level);
  } catch (const DataError &e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------

SequenceBatcher::SequenceBatcher(std::vector<int> codes, Index seq_len,
                                 Index batch_size, Overlap overlap,
                                 Index stride)
  : codes_(std::move(codes)), seq_len_(seq_len), batch_(batch_size),
    overlap_(overlap), stride_(overlap == Overlap::overlapping
                                 ? (stride > 0 ? stride : std::max<Index>(1, seq_len / 2))
                                 : seq_len) {
  if (seq_len <= 0 || batch_size <= 0)
    throw std::invalid_argument("sequence length and batch size must be > 0");
  const auto n = static_cast<Index>(codes_.size());
  if (n <= seq_len)
    throw DataError("corpus of " + std::to_string(n) +
                    " symbols is too short for sequences of " +
                    std::to_string(seq_len));
  // Each stream holds stream_len inputs plus one trailing target.
  stream_len_ = (n - 1) / batch_size;
  if (stream_len_ < seq_len)
    throw DataError("corpus of " + std::to_string(n) + " symbols cannot fill " +
                    std::to_string(batch_size) + " streams of " +
                    std::to_string(seq_len));
  windows_ = static_cast<std::size_t>((stream_len_ - seq_len) / stride_ + 1);
}

TextBatch SequenceBatcher::operator[](std::size_t k) const {
  if (k >= windows_)
    throw std::out_of_range("batch index out of range");
  TextBatch b;
  b.stream_start = k == 0 || overlap_ == Overlap::overlapping;
  b.inputs.assign(static_cast<std::size_t>(seq_len_),
                  std::vector<int>(static_cast<std::size_t>(batch_)));
  b.targets = b.inputs;
  const Index offset = static_cast<Index>(k) * stride_;
  for (Index s = 0; s < batch_; ++s) {
    const Index base = s * stream_len_ + offset;
    for (Index t = 0; t < seq_len_; ++t) {
      b.inputs[t][s] = codes_[static_cast<std::size_t>(base + t)];
      b.targets[t][s] = codes_[static_cast<std::size_t>(base + t + 1)];
    }
  }
  return b;
}

// ---------------------------------------------------------------------------

RawImages load_mnist_csv(const std::filesystem::path &path,
                         std::size_t limit) {
  std::ifstream in(path);
  if (!in)
    throw DataError("cannot open " + path.string());
  const Index side = 28;
  const Index pixels = side * side;
  std::vector<double> values;
  std::vector<int> labels;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r')
      line.pop_back();
    if (line.empty())
      continue;
    const char *p = line.data();
    const char *end = line.data() + line.size();
    std::vector<int> fields;
    fields.reserve(static_cast<std::size_t>(pixels + 1));
    while (p < end) {
      int v = 0;
      auto [next, ec] = std::from_chars(p, end, v);
      if (ec != std::errc())
        throw DataError(path.string() + ":" + std::to_string(line_no) +
                        ": malformed field");
      fields.push_back(v);
      p = next;
      if (p < end) {
        if (*p != ',')
          throw DataError(path.string() + ":" + std::to_string(line_no) +
                          ": expected ','");
        ++p;
      }
    }
    if (static_cast<Index>(fields.size()) != pixels + 1)
      throw DataError(path.string() + ":" + std::to_string(line_no) +
                      ": expected " + std::to_string(pixels + 1) +
                      " fields, got " + std::to_string(fields.size()));
    if (fields[0] < 0 || fields[0] > 9)
      throw DataError(path.string() + ":" + std::to_string(line_no) +
                      ": label " + std::to_string(fields[0]) +
                      " outside [0, 10)");
    labels.push_back(fields[0]);
    for (Index k = 1; k <= pixels; ++k) {
      if (fields[k] < 0 || fields[k] > 255)
        throw DataError(path.string() + ":" + std::to_string(line_no) +
                        ": pixel value outside 0..255");
      values.push_back(fields[k]);
    }
    if (limit && labels.size() == limit)
      break;
  }
  if (labels.empty())
    throw DataError(path.string() + ": no examples");
  RawImages raw;
  raw.side = side;
  raw.labels = std::move(labels);
  raw.pixels = Eigen::Map<Matrix>(values.data(),
                                  static_cast<Index>(raw.labels.size()), pixels);
  return raw;
}

Matrix downsample(const Matrix &images, Index side, Index factor) {
  if (factor <= 0 || side % factor != 0)
    throw std::invalid_argument("downsample factor " + std::to_string(factor) +
                                " does not divide side " + std::to_string(side));
  if (images.cols() != side * side)
    throw DimensionError("downsample: images are not " + std::to_string(side) +
                         "x" + std::to_string(side));
  const Index out_side = side / factor;
  Matrix out(images.rows(), out_side * out_side);
  const double inv = 1.0 / static_cast<double>(factor * factor);
  for (Index n = 0; n < images.rows(); ++n)
    for (Index r = 0; r < out_side; ++r)
      for (Index c = 0; c < out_side; ++c) {
        double acc = 0.0;
        for (Index dr = 0; dr < factor; ++dr)
          for (Index dc = 0; dc < factor; ++dc)
            acc += images(n, (r * factor + dr) * side + c * factor + dc);
        out(n, r * out_side + c) = acc * inv;
      }
  return out;
}

std::vector<int> make_permutation(Index length, std::uint64_t seed) {
  std::vector<int> perm(static_cast<std::size_t>(length));
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed, "data/permutation");
  // Fisher-Yates with our own uniform draws (portable across libstdc++ builds).
  for (std::size_t k = perm.size(); k > 1; --k) {
    const auto j = static_cast<std::size_t>(rng.uniform() * static_cast<double>(k));
    std::swap(perm[k - 1], perm[std::min(j, k - 1)]);
  }
  return perm;
}

std::vector<int> invert_permutation(std::span<const int> permutation) {
  std::vector<int> inv(permutation.size(), -1);
  for (std::size_t k = 0; k < permutation.size(); ++k) {
    const int p = permutation[k];
    if (p < 0 || static_cast<std::size_t>(p) >= permutation.size() ||
        inv[static_cast<std::size_t>(p)] != -1)
      throw std::invalid_argument("not a permutation");
    inv[static_cast<std::size_t>(p)] = static_cast<int>(k);
  }
  return inv;
}

Matrix apply_permutation(const Matrix &images,
                         std::span<const int> permutation) {
  if (static_cast<Index>(permutation.size()) != images.cols())
    throw DimensionError("permutation length does not match image size");
  Matrix out(images.rows(), images.cols());
  for (Index t = 0; t < images.cols(); ++t)
    out.col(t) = images.col(permutation[static_cast<std::size_t>(t)]);
  return out;
}

PermutedImageSet make_pmnist(const RawImages &raw,
                             std::optional<std::uint64_t> permutation_seed,
                             Index downsample_factor) {
  PermutedImageSet set;
  Matrix scaled = raw.pixels / 255.0;
  if (raw.pixels.size() > 0 && raw.pixels.maxCoeff() <= 1.0)
    scaled = raw.pixels; // already in [0, 1] (synthetic sets)
  if (downsample_factor > 1) {
    scaled = downsample(scaled, raw.side, downsample_factor);
    set.side = raw.side / downsample_factor;
  } else {
    set.side = raw.side;
  }
  const Index length = set.side * set.side;
  if (permutation_seed) {
    set.permutation = make_permutation(length, *permutation_seed);
  } else {
    set.permutation.resize(static_cast<std::size_t>(length));
    std::iota(set.permutation.begin(), set.permutation.end(), 0);
  }
  set.pixels = apply_permutation(scaled, set.permutation);
  set.labels = raw.labels;
  return set;
}

PermutedImageSet load_pmnist(const std::filesystem::path &path,
                             std::optional<std::uint64_t> permutation_seed,
                             Index downsample_factor, std::size_t limit) {
  return make_pmnist(load_mnist_csv(path, limit), permutation_seed,
                     downsample_factor);
}

RawImages make_toy_digits(std::size_t count, Index side, int classes,
                          double noise, std::uint64_t seed) {
  if (count == 0 || side <= 0 || classes < 2)
    throw std::invalid_argument("make_toy_digits: bad sizes");
  Rng proto_rng(seed, "toy/prototypes");
  Rng noise_rng(seed, "toy/noise");
  Rng order_rng(seed, "toy/order");
  const Index length = side * side;
  Matrix prototypes(classes, length);
  for (Index k = 0; k < prototypes.size(); ++k)
    prototypes.data()[k] = proto_rng.bernoulli(0.3) ? 1.0 : 0.0;

  RawImages raw;
  raw.side = side;
  raw.labels.resize(count);
  for (std::size_t n = 0; n < count; ++n)
    raw.labels[n] = static_cast<int>(n % static_cast<std::size_t>(classes));
  for (std::size_t k = count; k > 1; --k) {
    const auto j =
      static_cast<std::size_t>(order_rng.uniform() * static_cast<double>(k));
    std::swap(raw.labels[k - 1], raw.labels[std::min(j, k - 1)]);
  }
  raw.pixels.resize(static_cast<Index>(count), length);
  for (std::size_t n = 0; n < count; ++n)
    for (Index t = 0; t < length; ++t) {
      const double v = prototypes(raw.labels[n], t) + noise_rng.normal(0.0, noise);
      raw.pixels(static_cast<Index>(n), t) = std::clamp(v, 0.0, 1.0);
    }
  return raw;
}

PermutedImageSet subset(const PermutedImageSet &set, Index begin, Index end) {
  if (begin < 0 || end > set.pixels.rows() || begin >= end)
    throw std::out_of_range("subset: bad row range");
  PermutedImageSet out;
  out.pixels = set.pixels.middleRows(begin, end - begin);
  out.labels.assign(set.labels.begin() + begin, set.labels.begin() + end);
  out.permutation = set.permutation;
  out.side = set.side;
  return out;
}

} // namespace zoneout
