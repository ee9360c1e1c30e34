#include "mtlforge/data.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "mtlforge/rng.hpp"

namespace mtlforge {

namespace {

std::uint32_t read_u32_be(std::istream& in, const std::string& path) {
  std::array<unsigned char, 4> b;
  if (!in.read(reinterpret_cast<char*>(b.data()), 4)) {
    throw DataError(path + ": truncated header");
  }
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

void write_u32_be(std::ostream& out, std::uint32_t v) {
  const std::array<unsigned char, 4> b = {static_cast<unsigned char>(v >> 24),
                                          static_cast<unsigned char>(v >> 16),
                                          static_cast<unsigned char>(v >> 8),
                                          static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b.data()), 4);
}

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

}  // namespace

std::vector<RawExample> load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw DataError(images_path + ": cannot open");
  std::ifstream lbl(labels_path, std::ios::binary);
  if (!lbl) throw DataError(labels_path + ": cannot open");

  const std::uint32_t img_magic = read_u32_be(img, images_path);
  if (img_magic != kImageMagic) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "0x%08x", img_magic);
    throw DataError(images_path + ": bad magic " + buf + ", expected 0x00000803");
  }
  const std::uint32_t count = read_u32_be(img, images_path);
  const std::uint32_t rows = read_u32_be(img, images_path);
  const std::uint32_t cols = read_u32_be(img, images_path);

  const std::uint32_t lbl_magic = read_u32_be(lbl, labels_path);
  if (lbl_magic != kLabelMagic) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "0x%08x", lbl_magic);
    throw DataError(labels_path + ": bad magic " + buf + ", expected 0x00000801");
  }
  const std::uint32_t lbl_count = read_u32_be(lbl, labels_path);
  if (lbl_count != count) {
    throw DataError("count mismatch: " + images_path + " has " + std::to_string(count) +
                    " images, " + labels_path + " has " + std::to_string(lbl_count) + " labels");
  }

  std::vector<RawExample> out(count);
  const std::size_t pixels = static_cast<std::size_t>(rows) * cols;
  for (std::uint32_t i = 0; i < count; ++i) {
    RawExample& ex = out[i];
    ex.rows = static_cast<int>(rows);
    ex.cols = static_cast<int>(cols);
    ex.pixels.resize(pixels);
    if (!img.read(reinterpret_cast<char*>(ex.pixels.data()), static_cast<std::streamsize>(pixels))) {
      throw DataError(images_path + ": truncated at image " + std::to_string(i));
    }
    char c;
    if (!lbl.read(&c, 1)) throw DataError(labels_path + ": truncated at label " + std::to_string(i));
    ex.label = static_cast<std::uint8_t>(c);
  }
  return out;
}

void write_idx(const std::string& images_path, const std::string& labels_path,
               const std::vector<RawExample>& examples) {
  if (examples.empty()) throw DataError("write_idx: no examples");
  std::ofstream img(images_path, std::ios::binary);
  if (!img) throw DataError(images_path + ": cannot open for writing");
  std::ofstream lbl(labels_path, std::ios::binary);
  if (!lbl) throw DataError(labels_path + ": cannot open for writing");
  const int rows = examples[0].rows, cols = examples[0].cols;
  write_u32_be(img, kImageMagic);
  write_u32_be(img, static_cast<std::uint32_t>(examples.size()));
  write_u32_be(img, static_cast<std::uint32_t>(rows));
  write_u32_be(img, static_cast<std::uint32_t>(cols));
  write_u32_be(lbl, kLabelMagic);
  write_u32_be(lbl, static_cast<std::uint32_t>(examples.size()));
  for (const RawExample& ex : examples) {
    img.write(reinterpret_cast<const char*>(ex.pixels.data()),
              static_cast<std::streamsize>(ex.pixels.size()));
    const char c = static_cast<char>(ex.label);
    lbl.write(&c, 1);
  }
}

double NoiseSpec::alpha() const {
  if (noise_parts == 0.0 || std::isinf(signal_parts)) return 1.0;
  return signal_parts / (signal_parts + noise_parts);
}

NoiseSpec parse_snr_label(const std::string& label, std::uint64_t seed) {
  NoiseSpec spec;
  spec.seed = seed;
  if (label == "Inf" || label == "inf") {
    spec.signal_parts = std::numeric_limits<double>::infinity();
    spec.noise_parts = 0.0;
    return spec;
  }
  const std::size_t colon = label.find(':');
  if (colon == std::string::npos) {
    throw DataError("SNR label '" + label + "' is not 'Inf' or 'a:b'");
  }
  long s = 0, n = 0;
  try {
    std::size_t used = 0;
    s = std::stol(label.substr(0, colon), &used);
    if (used != colon) throw std::invalid_argument("trailing");
    n = std::stol(label.substr(colon + 1), &used);
    if (used != label.size() - colon - 1) throw std::invalid_argument("trailing");
  } catch (const std::exception&) {
    throw DataError("SNR label '" + label + "' is not 'Inf' or 'a:b'");
  }
  if (s < 1 || n < 1) {
    throw DataError("SNR label '" + label + "' needs positive signal and noise parts");
  }
  spec.signal_parts = static_cast<double>(s);
  spec.noise_parts = static_cast<double>(n);
  return spec;
}

namespace {

inline double f32_round(double v) { return static_cast<double>(static_cast<float>(v)); }

void f32_round_tensor(Tensor& t) {
  for (double& v : t.mutable_data()) v = f32_round(v);
}

}  // namespace

Preprocessed preprocess(const RawExample& raw, int target_size) {
  if (target_size < raw.rows || target_size < raw.cols) {
    throw DataError("preprocess: target size " + std::to_string(target_size) +
                    " below source " + std::to_string(raw.rows) + "x" + std::to_string(raw.cols));
  }
  const int S = target_size;
  std::vector<double> out(static_cast<std::size_t>(S) * S);
  for (int i = 0; i < S; ++i) {
    const int si = i * raw.rows / S;
    const std::uint8_t* srow = raw.pixels.data() + static_cast<std::size_t>(si) * raw.cols;
    double* drow = out.data() + static_cast<std::size_t>(i) * S;
    for (int j = 0; j < S; ++j) {
      const double v = static_cast<double>(srow[j * raw.cols / S]) / 255.0;
      drow[j] = v >= 0.5 ? 1.0 : 0.0;
    }
  }
  Tensor img({1, S, S}, std::move(out));
  return Preprocessed{img, img};
}

Tensor extrude_depth(const Tensor& mask, int label) {
  if (label < 0 || label > 9) throw DataError("extrude_depth: label out of range");
  const double d = static_cast<double>(label + 1) / 10.0;
  std::vector<double> out(mask.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double m = mask.at(i);
    if (m != 0.0 && m != 1.0) throw DataError("extrude_depth: mask is not binary");
    out[i] = d * m;
  }
  return Tensor(mask.shape(), std::move(out));
}

Tensor inject_noise(const Tensor& image, const NoiseSpec& spec) {
  const double a = spec.alpha();
  if (a == 1.0) return Tensor(image.shape(), image.data());
  Rng rng(spec.seed);
  std::vector<double> out(image.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a * image.at(i) + (1.0 - a) * rng.next_double();
  }
  return Tensor(image.shape(), std::move(out));
}

double estimate_mixing_alpha(const Tensor& clean, const Tensor& noisy) {
  if (clean.shape() != noisy.shape()) {
    throw DataError("estimate_mixing_alpha: shape mismatch " + shape_str(clean.shape()) + " vs " +
                    shape_str(noisy.shape()));
  }
  const std::size_t n = clean.numel();
  double cm = 0.0, ym = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    cm += clean.at(i);
    ym += noisy.at(i);
  }
  cm /= static_cast<double>(n);
  ym /= static_cast<double>(n);
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dc = clean.at(i) - cm;
    sxx += dc * dc;
    sxy += dc * (noisy.at(i) - ym);
  }
  if (sxx == 0.0) throw DataError("estimate_mixing_alpha: clean input has zero variance");
  return sxy / sxx;
}

double measured_snr(const Tensor& clean, const Tensor& noisy) {
  const double a = estimate_mixing_alpha(clean, noisy);
  if (a >= 1.0) return std::numeric_limits<double>::infinity();
  return a / (1.0 - a);
}

CohortSplit split_cohorts(int train_n) {
  if (train_n < 1 || train_n > 45000) {
    throw DataError("train_n " + std::to_string(train_n) + " outside [1, 45000]");
  }
  CohortSplit s;
  s.train_n = train_n;
  return s;
}

namespace {

RgbdSample make_sample(const RawExample& raw, std::uint32_t index, const DataConfig& cfg) {
  Preprocessed pp = preprocess(raw, cfg.image_size);
  Tensor depth = extrude_depth(pp.mask, raw.label);
  NoiseSpec spec = parse_snr_label(cfg.snr_label, Rng::derive(cfg.seed, index));
  Tensor noisy = inject_noise(pp.image, spec);
  f32_round_tensor(noisy);
  f32_round_tensor(depth);
  return RgbdSample{std::move(noisy), std::move(depth), static_cast<int>(raw.label), index};
}

}  // namespace

Dataset build_dataset(const std::vector<RawExample>& train_raw,
                      const std::vector<RawExample>& test_raw, const DataConfig& cfg) {
  const CohortSplit split = split_cohorts(cfg.train_n);
  if (static_cast<int>(train_raw.size()) < split.val_end) {
    throw DataError("training source has " + std::to_string(train_raw.size()) +
                    " examples; need at least " + std::to_string(split.val_end));
  }
  if (static_cast<int>(test_raw.size()) < split.test_n) {
    throw DataError("test source has " + std::to_string(test_raw.size()) +
                    " examples; need at least " + std::to_string(split.test_n));
  }
  Dataset ds;
  ds.train.reserve(static_cast<std::size_t>(split.train_n));
  for (int i = 0; i < split.train_n; ++i) {
    ds.train.push_back(make_sample(train_raw[static_cast<std::size_t>(i)],
                                   static_cast<std::uint32_t>(i), cfg));
  }
  ds.val.reserve(static_cast<std::size_t>(split.val_end - split.val_begin));
  for (int i = split.val_begin; i < split.val_end; ++i) {
    ds.val.push_back(make_sample(train_raw[static_cast<std::size_t>(i)],
                                 static_cast<std::uint32_t>(i), cfg));
  }
  ds.test.reserve(static_cast<std::size_t>(split.test_n));
  for (int i = 0; i < split.test_n; ++i) {
    ds.test.push_back(make_sample(test_raw[static_cast<std::size_t>(i)],
                                  static_cast<std::uint32_t>(i), cfg));
  }
  return ds;
}

// ---- cohort cache -----------------------------------------------------------

namespace {

constexpr char kCacheMagic[4] = {'X', 'M', 'N', '1'};
constexpr std::uint32_t kCacheVersion = 1;

void write_u32_le(std::ostream& out, std::uint32_t v) {
  const std::array<unsigned char, 4> b = {static_cast<unsigned char>(v),
                                          static_cast<unsigned char>(v >> 8),
                                          static_cast<unsigned char>(v >> 16),
                                          static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b.data()), 4);
}

std::uint32_t read_u32_le(std::istream& in, const std::string& path) {
  std::array<unsigned char, 4> b;
  if (!in.read(reinterpret_cast<char*>(b.data()), 4)) throw DataError(path + ": truncated");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

void write_f32_le(std::ostream& out, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  write_u32_le(out, v);
}

float read_f32_le(std::istream& in, const std::string& path) {
  const std::uint32_t v = read_u32_le(in, path);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

}  // namespace

void write_cohort_cache(const std::string& path, const std::vector<RgbdSample>& samples) {
  if (samples.empty()) throw DataError("write_cohort_cache: empty cohort");
  const int S = samples[0].image.dim(1);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError(tmp + ": cannot open for writing");
    out.write(kCacheMagic, 4);
    write_u32_le(out, kCacheVersion);
    write_u32_le(out, static_cast<std::uint32_t>(samples.size()));
    write_u32_le(out, static_cast<std::uint32_t>(S));
    for (const RgbdSample& s : samples) {
      write_u32_le(out, s.index);
      const char lbl = static_cast<char>(s.label);
      out.write(&lbl, 1);
      for (std::size_t i = 0; i < s.image.numel(); ++i) {
        write_f32_le(out, static_cast<float>(s.image.at(i)));
      }
      for (std::size_t i = 0; i < s.depth.numel(); ++i) {
        write_f32_le(out, static_cast<float>(s.depth.at(i)));
      }
    }
    if (!out) throw DataError(tmp + ": write failed");
  }
  std::filesystem::rename(tmp, path);
}

std::vector<RgbdSample> read_cohort_cache(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path + ": cannot open");
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kCacheMagic, 4) != 0) {
    throw DataError(path + ": bad cache magic, expected XMN1");
  }
  const std::uint32_t version = read_u32_le(in, path);
  if (version != kCacheVersion) {
    throw DataError(path + ": unsupported cache version " + std::to_string(version));
  }
  const std::uint32_t count = read_u32_le(in, path);
  const int S = static_cast<int>(read_u32_le(in, path));
  if (S <= 0 || count == 0) throw DataError(path + ": corrupt header");
  std::vector<RgbdSample> samples;
  samples.reserve(count);
  const std::size_t n = static_cast<std::size_t>(S) * S;
  for (std::uint32_t k = 0; k < count; ++k) {
    RgbdSample s;
    s.index = read_u32_le(in, path);
    char lbl;
    if (!in.read(&lbl, 1)) throw DataError(path + ": truncated at sample " + std::to_string(k));
    s.label = static_cast<int>(static_cast<unsigned char>(lbl));
    std::vector<double> img(n), dep(n);
    for (std::size_t i = 0; i < n; ++i) img[i] = static_cast<double>(read_f32_le(in, path));
    for (std::size_t i = 0; i < n; ++i) dep[i] = static_cast<double>(read_f32_le(in, path));
    s.image = Tensor({1, S, S}, std::move(img));
    s.depth = Tensor({1, S, S}, std::move(dep));
    samples.push_back(std::move(s));
  }
  return samples;
}

// ---- synthetic stand-in -----------------------------------------------------

namespace {

// Seven-segment layout on a 28x28 canvas. Horizontal segments are 4 px tall,
// vertical ones 4 px wide; the glyph box spans rows 2..25, cols 7..20.
void draw_rect(std::vector<std::uint8_t>& px, int r0, int r1, int c0, int c1, int dr, int dc) {
  for (int r = r0; r < r1; ++r) {
    const int rr = r + dr;
    if (rr < 0 || rr >= 28) continue;
    for (int c = c0; c < c1; ++c) {
      const int cc = c + dc;
      if (cc < 0 || cc >= 28) continue;
      px[static_cast<std::size_t>(rr) * 28 + cc] = 255;
    }
  }
}

RawExample synth_glyph(int label, std::uint64_t stream) {
  Rng rng(stream);
  const int dr = static_cast<int>(rng.next_below(5)) - 2;  // [-2, 2]
  const int dc = static_cast<int>(rng.next_below(7)) - 3;  // [-3, 3]
  // segment presence per digit: A B C D E F G
  static const std::array<std::array<int, 7>, 10> seg = {{
      {1, 1, 1, 1, 1, 1, 0},  // 0
      {0, 1, 1, 0, 0, 0, 0},  // 1
      {1, 1, 0, 1, 1, 0, 1},  // 2
      {1, 1, 1, 1, 0, 0, 1},  // 3
      {0, 1, 1, 0, 0, 1, 1},  // 4
      {1, 0, 1, 1, 0, 1, 1},  // 5
      {1, 0, 1, 1, 1, 1, 1},  // 6
      {1, 1, 1, 0, 0, 0, 0},  // 7
      {1, 1, 1, 1, 1, 1, 1},  // 8
      {1, 1, 1, 1, 0, 1, 1},  // 9
  }};
  RawExample ex;
  ex.rows = 28;
  ex.cols = 28;
  ex.label = static_cast<std::uint8_t>(label);
  ex.pixels.assign(784, 0);
  const auto& s = seg[static_cast<std::size_t>(label)];
  if (s[0]) draw_rect(ex.pixels, 2, 6, 7, 21, dr, dc);     // A: top
  if (s[1]) draw_rect(ex.pixels, 4, 14, 17, 21, dr, dc);   // B: top right
  if (s[2]) draw_rect(ex.pixels, 14, 24, 17, 21, dr, dc);  // C: bottom right
  if (s[3]) draw_rect(ex.pixels, 22, 26, 7, 21, dr, dc);   // D: bottom
  if (s[4]) draw_rect(ex.pixels, 14, 24, 7, 11, dr, dc);   // E: bottom left
  if (s[5]) draw_rect(ex.pixels, 4, 14, 7, 11, dr, dc);    // F: top left
  if (s[6]) draw_rect(ex.pixels, 12, 16, 7, 21, dr, dc);   // G: middle
  return ex;
}

std::vector<RawExample> synth_set(int count, std::uint64_t seed, std::uint64_t cohort_salt) {
  std::vector<RawExample> out;
  out.reserve(static_cast<std::size_t>(count));
  // labels come in shuffled blocks of 10 so every prefix is nearly balanced
  std::array<int, 10> block{};
  for (int i = 0; i < count; ++i) {
    if (i % 10 == 0) {
      for (int k = 0; k < 10; ++k) block[static_cast<std::size_t>(k)] = k;
      Rng shuffle(Rng::derive(seed ^ cohort_salt, 0xB10C000ULL + static_cast<std::uint64_t>(i / 10)));
      for (int k = 9; k > 0; --k) {
        const int j = static_cast<int>(shuffle.next_below(static_cast<std::uint64_t>(k + 1)));
        std::swap(block[static_cast<std::size_t>(k)], block[static_cast<std::size_t>(j)]);
      }
    }
    const int label = block[static_cast<std::size_t>(i % 10)];
    out.push_back(synth_glyph(label, Rng::derive(seed ^ cohort_salt, static_cast<std::uint64_t>(i))));
  }
  return out;
}

}  // namespace

void write_synthetic_idx(const std::string& dir, std::uint64_t seed, int train_count,
                         int test_count) {
  std::filesystem::create_directories(dir);
  const IdxPaths p = idx_paths(dir);
  write_idx(p.train_images, p.train_labels, synth_set(train_count, seed, 0x5EED7714ULL));
  write_idx(p.test_images, p.test_labels, synth_set(test_count, seed, 0x7E57F00DULL));
}

IdxPaths idx_paths(const std::string& dir) {
  namespace fs = std::filesystem;
  IdxPaths p;
  p.train_images = (fs::path(dir) / "train-images-idx3-ubyte").string();
  p.train_labels = (fs::path(dir) / "train-labels-idx1-ubyte").string();
  p.test_images = (fs::path(dir) / "t10k-images-idx3-ubyte").string();
  p.test_labels = (fs::path(dir) / "t10k-labels-idx1-ubyte").string();
  return p;
}

bool IdxPaths::all_exist() const {
  namespace fs = std::filesystem;
  return fs::exists(train_images) && fs::exists(train_labels) && fs::exists(test_images) &&
         fs::exists(test_labels);
}

std::vector<long> label_histogram(const std::vector<RgbdSample>& samples, int num_classes) {
  std::vector<long> counts(static_cast<std::size_t>(num_classes), 0);
  for (const RgbdSample& s : samples) {
    if (s.label < 0 || s.label >= num_classes) throw DataError("label out of range in cohort");
    ++counts[static_cast<std::size_t>(s.label)];
  }
  return counts;
}

}  // namespace mtlforge
