#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mtlforge/tensor.hpp"

namespace mtlforge {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One raw IDX record: row-major pixel bytes plus its label.
struct RawExample {
  std::vector<std::uint8_t> pixels;
  int rows = 0;
  int cols = 0;
  std::uint8_t label = 0;
};

// Parses an IDX image/label file pair (big-endian, magic 0x803 / 0x801).
std::vector<RawExample> load_idx(const std::string& images_path, const std::string& labels_path);

// Writes an IDX pair (used by fixtures and the synthetic dataset).
void write_idx(const std::string& images_path, const std::string& labels_path,
               const std::vector<RawExample>& examples);

// One row of the depth-augmented dataset. Values are rounded through 32-bit
// floats so the in-memory pipeline and the cohort caches agree bit for bit.
struct RgbdSample {
  Tensor image;  // [1,S,S], in [0,1]
  Tensor depth;  // [1,S,S], in [0,1]
  int label = 0;
  std::uint32_t index = 0;  // index in the source IDX file
};

struct NoiseSpec {
  double signal_parts = 1.0;  // > 0, may be +infinity
  double noise_parts = 0.0;   // >= 0
  std::uint64_t seed = 0;

  // mixing coefficient S/(S+N); 1 iff noiseless
  double alpha() const;
};

// "Inf" or "a:b" with positive integers.
NoiseSpec parse_snr_label(const std::string& label, std::uint64_t seed = 0);

struct Preprocessed {
  Tensor image;  // binarized image (equal to mask)
  Tensor mask;
};

// Divide by 255, nearest-neighbor resample to target_size, binarize at 0.5.
Preprocessed preprocess(const RawExample& raw, int target_size);

// Foreground pixels get (label+1)/10, background stays 0.
Tensor extrude_depth(const Tensor& mask, int label);

// Convex mixing with uniform noise: out = alpha*image + (1-alpha)*u with
// u ~ Uniform[0,1) per pixel from spec.seed. Identity (bit-exact) when
// alpha == 1. Output stays in [0,1].
Tensor inject_noise(const Tensor& image, const NoiseSpec& spec);

// Least-squares slope of noisy on clean; recovers the mixing alpha.
double estimate_mixing_alpha(const Tensor& clean, const Tensor& noisy);

// Recovered signal:noise parts ratio alpha/(1-alpha); +inf when noisy == clean.
double measured_snr(const Tensor& clean, const Tensor& noisy);

struct CohortSplit {
  int train_n = 512;
  int val_begin = 45000;
  int val_end = 46500;
  int test_n = 1000;
};

CohortSplit split_cohorts(int train_n);

struct DataConfig {
  int train_n = 512;
  int image_size = 32;
  std::string snr_label = "Inf";
  std::uint64_t seed = 17;
};

struct Dataset {
  std::vector<RgbdSample> train, val, test;
};

// The full pipeline: cohort selection, preprocessing, depth extrusion, and
// per-sample noise streams seeded as derive(seed, index).
Dataset build_dataset(const std::vector<RawExample>& train_raw,
                      const std::vector<RawExample>& test_raw, const DataConfig& cfg);

// Cohort cache, magic "XMN1" (see README for the byte layout).
void write_cohort_cache(const std::string& path, const std::vector<RgbdSample>& samples);
std::vector<RgbdSample> read_cohort_cache(const std::string& path);

// Deterministic MNIST-shaped stand-in: 46500 train / 10000 test glyph images
// written as standard IDX pairs. Used when the real MNIST files are absent.
void write_synthetic_idx(const std::string& dir, std::uint64_t seed, int train_count = 46500,
                         int test_count = 10000);

// Conventional MNIST file names under `dir`; synthetic files use the same names.
struct IdxPaths {
  std::string train_images, train_labels, test_images, test_labels;
  bool all_exist() const;
};
IdxPaths idx_paths(const std::string& dir);

std::vector<long> label_histogram(const std::vector<RgbdSample>& samples, int num_classes);

}  // namespace mtlforge
