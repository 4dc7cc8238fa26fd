#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vitdf/random.hpp"
#include "vitdf/tensor.hpp"
#include "vitdf/vit.hpp"

namespace vitdf {

enum class Split { Unassigned, Train, Val, Test };

std::string_view split_key(Split s);  // "unassigned" / "train" / "val" / "test"
Split split_from_key(std::string_view key);

struct SplitRatio {
  unsigned train = 14;
  unsigned val = 4;
  unsigned test = 1;

  unsigned total() const { return train + val + test; }
  /// Parses "14:4:1".
  static SplitRatio parse(std::string_view text);
  std::string to_string() const;

  friend bool operator==(const SplitRatio&, const SplitRatio&) = default;
};

/// Per-split counts for `n` items by largest-remainder rounding of the ratio.
/// Ties in the fractional part go to the earlier split (train, val, test).
std::array<std::size_t, 3> largest_remainder(std::size_t n, const SplitRatio& ratio);

struct ManifestRecord {
  std::string path;
  Label label = Label::Real;
  Split split = Split::Unassigned;

  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  SplitRatio ratio;
  std::vector<ManifestRecord> records;
  /// Files skipped while scanning; not serialized.
  std::vector<std::string> warnings;

  std::size_t count(Label label, Split split) const;
  std::size_t count(Split split) const;
  std::vector<std::size_t> indices(Split split) const;

  nlohmann::ordered_json to_json() const;
  static DatasetManifest from_json(const nlohmann::ordered_json& j);
  /// Writes pretty-printed JSON with a trailing newline.
  void save(const std::filesystem::path& path) const;
  static DatasetManifest load(const std::filesystem::path& path);
};

/// One record per decodable image under `<root>/real` and `<root>/fake`
/// (real first, each in lexicographic filename order). Undecodable files are
/// listed in `warnings`.
DatasetManifest scan_dataset(const std::filesystem::path& root);

/// Shuffles each class with `seed` and assigns splits by largest remainder.
DatasetManifest stratified_split(DatasetManifest manifest, const SplitRatio& ratio, std::uint64_t seed);

/// Appends seeded duplicates (with replacement) of minority-class Train
/// records until both classes have equal Train counts. Val/Test records and
/// all originals are untouched.
DatasetManifest oversample(DatasetManifest manifest, std::uint64_t seed);

// ---- pixels ----------------------------------------------------------------

/// Bilinear resize of a [c x h x w] tensor with half-pixel centers and edge clamping.
Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w);

/// [3 x H x W] in [0, 255] to [3 x target x target] in [-1, 1]:
/// bilinear resize, scale to [0, 1], then (x - 0.5) / 0.5 per channel.
Tensor preprocess(const Tensor& pixels, std::size_t target = 224);

struct AugmentationSpec {
  double horizontal_flip_prob = 0.0;
  double rotation_max_degrees = 0.0;
  double brightness_jitter = 0.0;
  double contrast_jitter = 0.0;
  /// Minimum crop area fraction; values of 0 or 1 disable cropping.
  double crop_scale_min = 1.0;

  /// Flip 0.5, rotation 15 degrees, brightness/contrast 0.2, crop area >= 0.8.
  static AugmentationSpec standard();
  static AugmentationSpec none() { return {}; }
  bool is_identity() const;
  void validate() const;

  friend bool operator==(const AugmentationSpec&, const AugmentationSpec&) = default;
};

void to_json(nlohmann::ordered_json& j, const AugmentationSpec& s);
void from_json(const nlohmann::ordered_json& j, AugmentationSpec& s);

/// Substream keyed by (sample index, epoch); independent of visiting order.
RandomSource augmentation_stream(const RandomSource& root, std::size_t sample_index, std::size_t epoch);

/// Applies, in order: horizontal flip, rotation (bilinear, reflect padding),
/// brightness/contrast jitter, random resized crop. Disabled steps consume no
/// randomness and leave the image bit-identical.
Tensor augment(const Tensor& image, const AugmentationSpec& spec, RandomSource rng);

Tensor flip_horizontal(const Tensor& image);
Tensor rotate(const Tensor& image, double degrees);

// ---- batching --------------------------------------------------------------

/// Ordered collection of labeled samples that yields model-ready tensors.
class SampleSet {
 public:
  struct Options {
    std::size_t image_size = 224;
    std::optional<AugmentationSpec> augmentation;
    std::uint64_t seed = 0;
  };

  static SampleSet from_manifest(const DatasetManifest& manifest, Split split, Options options);
  /// Samples that are already preprocessed tensors (no decoding, no augmentation).
  static SampleSet from_tensors(std::vector<Tensor> images, std::vector<Label> labels);

  std::size_t size() const { return labels_.size(); }
  bool empty() const { return labels_.empty(); }
  Label label(std::size_t i) const { return labels_.at(i); }
  /// Sample `i` as seen in `epoch` (augmentation depends on both).
  Tensor load(std::size_t i, std::size_t epoch = 0) const;

 private:
  std::vector<Label> labels_;
  std::vector<std::string> paths_;
  std::vector<Tensor> tensors_;
  Options options_;
};

struct Batch {
  Tensor images;   // [B x 3 x s x s]
  Tensor targets;  // [B x C] one-hot, Real = 0, Fake = 1
  std::vector<std::size_t> indices;

  std::size_t size() const { return indices.size(); }
  /// Image `b` as [3 x s x s].
  Tensor image(std::size_t b) const;
  Tensor target(std::size_t b) const;
};

class BatchStream {
 public:
  BatchStream(const SampleSet& samples, std::vector<std::size_t> order, std::size_t batch_size, std::size_t epoch,
              std::size_t num_classes);

  std::optional<Batch> next();
  std::size_t batch_count() const { return (order_.size() + batch_size_ - 1) / batch_size_; }
  const std::vector<std::size_t>& order() const { return order_; }

 private:
  const SampleSet* samples_;
  std::vector<std::size_t> order_;
  std::size_t batch_size_;
  std::size_t epoch_;
  std::size_t num_classes_;
  std::size_t cursor_ = 0;
};

/// Train batches are shuffled with a per-epoch substream of `rng`; other
/// orders follow the sample set. The last partial batch is kept.
BatchStream make_batches(const SampleSet& samples, std::size_t batch_size, bool shuffle, const RandomSource& rng,
                         std::size_t epoch, std::size_t num_classes = 2);

BatchStream make_batches(const SampleSet& samples, Split split, std::size_t batch_size, const RandomSource& rng,
                         std::size_t epoch, std::size_t num_classes = 2);

}  // namespace vitdf
