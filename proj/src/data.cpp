#include "vitdf/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "vitdf/image.hpp"

namespace fs = std::filesystem;

namespace vitdf {

std::string_view split_key(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    case Split::Unassigned: break;
  }
  return "unassigned";
}

Split split_from_key(std::string_view key) {
  if (key == "train") return Split::Train;
  if (key == "val") return Split::Val;
  if (key == "test") return Split::Test;
  if (key == "unassigned") return Split::Unassigned;
  throw DataError("unknown split '" + std::string(key) + "'");
}

SplitRatio SplitRatio::parse(std::string_view text) {
  SplitRatio r;
  unsigned* parts[] = {&r.train, &r.val, &r.test};
  std::size_t begin = 0;
  for (int i = 0; i < 3; ++i) {
    std::size_t end = i < 2 ? text.find(':', begin) : text.size();
    if (end == std::string_view::npos) throw ConfigError("ratio must look like 14:4:1, got '" + std::string(text) + "'");
    auto field = text.substr(begin, end - begin);
    auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), *parts[i]);
    if (ec != std::errc{} || ptr != field.data() + field.size()) {
      throw ConfigError("ratio must look like 14:4:1, got '" + std::string(text) + "'");
    }
    begin = end + 1;
  }
  if (r.total() == 0) throw ConfigError("ratio parts must not all be zero");
  return r;
}

std::string SplitRatio::to_string() const {
  return std::to_string(train) + ":" + std::to_string(val) + ":" + std::to_string(test);
}

std::array<std::size_t, 3> largest_remainder(std::size_t n, const SplitRatio& ratio) {
  const std::array<std::size_t, 3> parts{ratio.train, ratio.val, ratio.test};
  const std::size_t total = ratio.total();
  if (total == 0) throw ConfigError("ratio parts must not all be zero");
  std::array<std::size_t, 3> counts{};
  std::array<std::size_t, 3> remainders{};  // numerators over `total`
  std::size_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    counts[i] = n * parts[i] / total;
    remainders[i] = n * parts[i] % total;
    assigned += counts[i];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return remainders[a] > remainders[b]; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++counts[order[k]];
  return counts;
}

// ---- manifest --------------------------------------------------------------

std::size_t DatasetManifest::count(Label label, Split split) const {
  return static_cast<std::size_t>(std::count_if(records.begin(), records.end(), [&](const ManifestRecord& r) {
    return r.label == label && r.split == split;
  }));
}

std::size_t DatasetManifest::count(Split split) const {
  return static_cast<std::size_t>(
      std::count_if(records.begin(), records.end(), [&](const ManifestRecord& r) { return r.split == split; }));
}

std::vector<std::size_t> DatasetManifest::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].split == split) out.push_back(i);
  return out;
}

nlohmann::ordered_json DatasetManifest::to_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["ratio"] = {ratio.train, ratio.val, ratio.test};
  auto& recs = j["records"] = nlohmann::ordered_json::array();
  for (const auto& r : records) {
    recs.push_back({{"path", r.path}, {"label", label_key(r.label)}, {"split", split_key(r.split)}});
  }
  return j;
}

DatasetManifest DatasetManifest::from_json(const nlohmann::ordered_json& j) {
  try {
    DatasetManifest m;
    m.seed = j.at("seed").get<std::uint64_t>();
    const auto& ratio = j.at("ratio");
    if (!ratio.is_array() || ratio.size() != 3) throw DataError("manifest ratio must have three parts");
    m.ratio = {ratio[0].get<unsigned>(), ratio[1].get<unsigned>(), ratio[2].get<unsigned>()};
    for (const auto& r : j.at("records")) {
      m.records.push_back({r.at("path").get<std::string>(), label_from_key(r.at("label").get<std::string>()),
                           split_from_key(r.at("split").get<std::string>())});
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed manifest: ") + e.what());
  }
}

void DatasetManifest::save(const fs::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write manifest '" + path.string() + "'");
  out << to_json().dump(2) << '\n';
  if (!out) throw DataError("failed writing manifest '" + path.string() + "'");
}

DatasetManifest DatasetManifest::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read manifest '" + path.string() + "'");
  nlohmann::ordered_json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest '" + path.string() + "': " + e.what());
  }
  return from_json(j);
}

DatasetManifest scan_dataset(const fs::path& root) {
  DatasetManifest m;
  for (Label label : {Label::Real, Label::Fake}) {
    const fs::path dir = root / label_key(label);
    if (!fs::is_directory(dir)) throw DataError("missing class directory '" + dir.string() + "'");
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file() && !entry.path().filename().string().starts_with('.')) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    std::size_t accepted = 0;
    for (const auto& f : files) {
      try {
        (void)read_image(f);
      } catch (const DataError& e) {
        m.warnings.emplace_back(e.what());
        continue;
      }
      m.records.push_back({f.generic_string(), label, Split::Unassigned});
      ++accepted;
    }
    if (accepted == 0) throw DataError("class '" + std::string(label_key(label)) + "' has no images");
  }
  return m;
}

DatasetManifest stratified_split(DatasetManifest manifest, const SplitRatio& ratio, std::uint64_t seed) {
  manifest.seed = seed;
  manifest.ratio = ratio;
  const RandomSource root(seed);
  for (Label label : {Label::Real, Label::Fake}) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < manifest.records.size(); ++i)
      if (manifest.records[i].label == label) members.push_back(i);
    if (members.empty()) throw DataError("cannot split: class '" + std::string(label_key(label)) + "' is empty");
    RandomSource rng = root.substream("split/" + std::string(label_key(label)));
    rng.shuffle(members);
    const auto counts = largest_remainder(members.size(), ratio);
    std::size_t k = 0;
    for (std::size_t s = 0; s < 3; ++s) {
      const Split split = s == 0 ? Split::Train : s == 1 ? Split::Val : Split::Test;
      for (std::size_t c = 0; c < counts[s]; ++c) manifest.records[members[k++]].split = split;
    }
  }
  return manifest;
}

DatasetManifest oversample(DatasetManifest manifest, std::uint64_t seed) {
  std::vector<std::size_t> by_class[2];
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    const auto& r = manifest.records[i];
    if (r.split == Split::Train) by_class[static_cast<int>(r.label)].push_back(i);
  }
  for (Label label : {Label::Real, Label::Fake}) {
    if (by_class[static_cast<int>(label)].empty()) {
      throw DataError("cannot oversample: class '" + std::string(label_key(label)) + "' is absent from train");
    }
  }
  const int minority = by_class[0].size() < by_class[1].size() ? 0 : 1;
  const auto& pool = by_class[minority];
  const std::size_t deficit = by_class[1 - minority].size() - pool.size();
  RandomSource rng = RandomSource(seed).substream("oversample");
  for (std::size_t k = 0; k < deficit; ++k) manifest.records.push_back(manifest.records[pool[rng.index(pool.size())]]);
  return manifest;
}

// ---- pixels ----------------------------------------------------------------

namespace {

void require_image(const Tensor& t, const char* op) {
  if (t.rank() != 3) throw ShapeError(std::string(op) + ": expected [c x h x w], got " + t.shape_string());
}

/// Samples channel `c` of `img` at continuous coordinates, clamped to the border.
double sample_clamped(const Tensor& img, std::size_t c, double y, double x) {
  const std::size_t h = img.dim(1), w = img.dim(2);
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
  const double* base = img.data().data() + c * h * w;
  const double top = base[y0 * w + x0] * (1.0 - fx) + base[y0 * w + x1] * fx;
  const double bottom = base[y1 * w + x0] * (1.0 - fx) + base[y1 * w + x1] * fx;
  return top * (1.0 - fy) + bottom * fy;
}

/// Mirrors `t` into [0, n-1] about the edge pixel centers.
double reflect(double t, std::size_t n) {
  if (n == 1) return 0.0;
  const double period = 2.0 * static_cast<double>(n - 1);
  t = std::fmod(std::abs(t), period);
  return t > static_cast<double>(n - 1) ? period - t : t;
}

Tensor crop(const Tensor& image, std::size_t top, std::size_t left, std::size_t side) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor out(Shape{c, side, side});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x) out[(ch * side + y) * side + x] = image[(ch * h + top + y) * w + left + x];
  return out;
}

}  // namespace

Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w) {
  require_image(image, "resize_bilinear");
  if (out_h == 0 || out_w == 0) throw ShapeError("resize_bilinear: zero-sized target");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h == out_h && w == out_w) return image;
  Tensor out(Shape{c, out_h, out_w});
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < out_h; ++y)
      for (std::size_t x = 0; x < out_w; ++x)
        out[(ch * out_h + y) * out_w + x] =
            sample_clamped(image, ch, (static_cast<double>(y) + 0.5) * sy - 0.5, (static_cast<double>(x) + 0.5) * sx - 0.5);
  return out;
}

Tensor preprocess(const Tensor& pixels, std::size_t target) {
  if (pixels.rank() != 3 || pixels.dim(0) != 3) {
    throw ShapeError("preprocess: expected [3 x H x W] pixels, got " + pixels.shape_string());
  }
  if (target == 0) throw ShapeError("preprocess: zero target size");
  Tensor out = resize_bilinear(pixels, target, target);
  out.set_requires_grad(false);
  for (auto& v : out.data()) v = std::clamp((v / 255.0 - 0.5) / 0.5, -1.0, 1.0);
  return out;
}

AugmentationSpec AugmentationSpec::standard() { return {0.5, 15.0, 0.2, 0.2, 0.8}; }

bool AugmentationSpec::is_identity() const {
  return horizontal_flip_prob == 0.0 && rotation_max_degrees == 0.0 && brightness_jitter == 0.0 &&
         contrast_jitter == 0.0 && (crop_scale_min == 0.0 || crop_scale_min == 1.0);
}

void AugmentationSpec::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("invalid augmentation spec: " + m); };
  if (!(horizontal_flip_prob >= 0.0 && horizontal_flip_prob <= 1.0)) fail("horizontal_flip_prob must lie in [0, 1]");
  if (!(rotation_max_degrees >= 0.0 && rotation_max_degrees <= 45.0)) fail("rotation_max_degrees must lie in [0, 45]");
  if (!(brightness_jitter >= 0.0 && brightness_jitter <= 1.0)) fail("brightness_jitter must lie in [0, 1]");
  if (!(contrast_jitter >= 0.0 && contrast_jitter <= 1.0)) fail("contrast_jitter must lie in [0, 1]");
  if (!(crop_scale_min >= 0.0 && crop_scale_min <= 1.0)) fail("crop_scale_min must lie in [0, 1] (0 disables cropping)");
}

void to_json(nlohmann::ordered_json& j, const AugmentationSpec& s) {
  j = nlohmann::ordered_json{{"horizontal_flip_prob", s.horizontal_flip_prob},
                             {"rotation_max_degrees", s.rotation_max_degrees},
                             {"brightness_jitter", s.brightness_jitter},
                             {"contrast_jitter", s.contrast_jitter},
                             {"crop_scale_min", s.crop_scale_min}};
}

void from_json(const nlohmann::ordered_json& j, AugmentationSpec& s) {
  AugmentationSpec d;
  s.horizontal_flip_prob = j.value("horizontal_flip_prob", d.horizontal_flip_prob);
  s.rotation_max_degrees = j.value("rotation_max_degrees", d.rotation_max_degrees);
  s.brightness_jitter = j.value("brightness_jitter", d.brightness_jitter);
  s.contrast_jitter = j.value("contrast_jitter", d.contrast_jitter);
  s.crop_scale_min = j.value("crop_scale_min", d.crop_scale_min);
}

RandomSource augmentation_stream(const RandomSource& root, std::size_t sample_index, std::size_t epoch) {
  return root.substream("augment").substream(epoch).substream(sample_index);
}

Tensor flip_horizontal(const Tensor& image) {
  require_image(image, "flip_horizontal");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor out(image.shape());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(ch * h + y) * w + x] = image[(ch * h + y) * w + (w - 1 - x)];
  return out;
}

Tensor rotate(const Tensor& image, double degrees) {
  require_image(image, "rotate");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const double theta = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  const double cy = (static_cast<double>(h) - 1.0) / 2.0, cx = (static_cast<double>(w) - 1.0) / 2.0;
  Tensor out(image.shape());
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      // Inverse map: rotate the output coordinate by -theta about the center.
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      const double sx = reflect(cs * dx + sn * dy + cx, w);
      const double sy = reflect(-sn * dx + cs * dy + cy, h);
      for (std::size_t ch = 0; ch < c; ++ch) out[(ch * h + y) * w + x] = sample_clamped(image, ch, sy, sx);
    }
  }
  return out;
}

Tensor augment(const Tensor& image, const AugmentationSpec& spec, RandomSource rng) {
  require_image(image, "augment");
  spec.validate();
  Tensor out = image;
  if (spec.horizontal_flip_prob > 0.0 && rng.uniform() < spec.horizontal_flip_prob) out = flip_horizontal(out);
  if (spec.rotation_max_degrees > 0.0) {
    out = rotate(out, rng.uniform(-spec.rotation_max_degrees, spec.rotation_max_degrees));
  }
  if (spec.brightness_jitter > 0.0 || spec.contrast_jitter > 0.0) {
    const double brightness =
        spec.brightness_jitter > 0.0 ? rng.uniform(1.0 - spec.brightness_jitter, 1.0 + spec.brightness_jitter) : 1.0;
    const double contrast =
        spec.contrast_jitter > 0.0 ? rng.uniform(1.0 - spec.contrast_jitter, 1.0 + spec.contrast_jitter) : 1.0;
    // Jitter in [0, 1] intensity space, then map back to [-1, 1].
    auto a = out.array();
    a = (a + 1.0) * 0.5 * brightness;
    const double m = a.mean();
    a = ((a - m) * contrast + m).max(0.0).min(1.0) * 2.0 - 1.0;
  }
  if (spec.crop_scale_min > 0.0 && spec.crop_scale_min < 1.0) {
    const std::size_t h = out.dim(1), w = out.dim(2), s = std::min(h, w);
    const double area = rng.uniform(spec.crop_scale_min, 1.0);
    const std::size_t side = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::lround(static_cast<double>(s) * std::sqrt(area))), 1, s);
    const std::size_t top = rng.index(h - side + 1);
    const std::size_t left = rng.index(w - side + 1);
    out = resize_bilinear(crop(out, top, left, side), h, w);
  }
  return out;
}

// ---- batching --------------------------------------------------------------

SampleSet SampleSet::from_manifest(const DatasetManifest& manifest, Split split, Options options) {
  if (options.augmentation) options.augmentation->validate();
  SampleSet s;
  s.options_ = std::move(options);
  for (const auto& r : manifest.records) {
    if (r.split != split) continue;
    s.labels_.push_back(r.label);
    s.paths_.push_back(r.path);
  }
  return s;
}

SampleSet SampleSet::from_tensors(std::vector<Tensor> images, std::vector<Label> labels) {
  if (images.size() != labels.size()) throw DataError("from_tensors: image and label counts differ");
  SampleSet s;
  s.tensors_ = std::move(images);
  s.labels_ = std::move(labels);
  return s;
}

Tensor SampleSet::load(std::size_t i, std::size_t epoch) const {
  if (i >= labels_.size()) throw DataError("sample index " + std::to_string(i) + " out of range");
  if (!tensors_.empty()) return tensors_[i];
  Tensor image;
  try {
    image = preprocess(read_image(paths_[i]), options_.image_size);
  } catch (const ShapeError& e) {
    throw DataError("'" + paths_[i] + "': " + e.what());
  }
  if (options_.augmentation && !options_.augmentation->is_identity()) {
    image = augment(image, *options_.augmentation, augmentation_stream(RandomSource(options_.seed), i, epoch));
  }
  return image;
}

Tensor Batch::image(std::size_t b) const {
  const std::size_t per = images.size() / images.dim(0);
  Shape shape(images.shape().begin() + 1, images.shape().end());
  return Tensor(shape, std::vector<double>(images.data().begin() + b * per, images.data().begin() + (b + 1) * per));
}

Tensor Batch::target(std::size_t b) const {
  const std::size_t c = targets.dim(1);
  return Tensor(Shape{c}, std::vector<double>(targets.data().begin() + b * c, targets.data().begin() + (b + 1) * c));
}

BatchStream::BatchStream(const SampleSet& samples, std::vector<std::size_t> order, std::size_t batch_size,
                         std::size_t epoch, std::size_t num_classes)
    : samples_(&samples), order_(std::move(order)), batch_size_(batch_size), epoch_(epoch), num_classes_(num_classes) {
  if (batch_size_ == 0) throw ConfigError("batch size must be at least 1");
}

std::optional<Batch> BatchStream::next() {
  if (cursor_ >= order_.size()) return std::nullopt;
  const std::size_t n = std::min(batch_size_, order_.size() - cursor_);
  Batch batch;
  std::vector<double> pixels;
  Shape image_shape;
  batch.targets = Tensor(Shape{n, num_classes_});
  for (std::size_t b = 0; b < n; ++b) {
    const std::size_t idx = order_[cursor_ + b];
    Tensor img = samples_->load(idx, epoch_);
    if (b == 0) {
      image_shape = img.shape();
      pixels.reserve(n * img.size());
    } else if (img.shape() != image_shape) {
      throw ShapeError("batch mixes image shapes " + to_string(image_shape) + " and " + img.shape_string());
    }
    pixels.insert(pixels.end(), img.data().begin(), img.data().end());
    batch.targets.at(b, static_cast<std::size_t>(samples_->label(idx))) = 1.0;
    batch.indices.push_back(idx);
  }
  Shape shape{n};
  shape.insert(shape.end(), image_shape.begin(), image_shape.end());
  batch.images = Tensor(std::move(shape), std::move(pixels));
  cursor_ += n;
  return batch;
}

BatchStream make_batches(const SampleSet& samples, std::size_t batch_size, bool shuffle, const RandomSource& rng,
                         std::size_t epoch, std::size_t num_classes) {
  if (samples.empty()) throw DataError("cannot batch an empty split");
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (shuffle) {
    RandomSource stream = rng.substream("shuffle").substream(epoch);
    stream.shuffle(order);
  }
  return BatchStream(samples, std::move(order), batch_size, epoch, num_classes);
}

BatchStream make_batches(const SampleSet& samples, Split split, std::size_t batch_size, const RandomSource& rng,
                         std::size_t epoch, std::size_t num_classes) {
  return make_batches(samples, batch_size, split == Split::Train, rng, epoch, num_classes);
}

}  // namespace vitdf
