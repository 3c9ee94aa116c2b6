#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "metadock/tensor.hpp"

namespace metadock::tasks {

enum class Split { kMetaTrain, kMetaVal, kMetaTest };

std::string to_string(Split split);
Split parse_split(const std::string& text);

struct EpisodeSpec {
  int n_way = 5;
  int k_shot = 5;
  int query_per_class = 15;
  int image_size = 16;
  int channels = 3;

  void validate() const;
  bool operator==(const EpisodeSpec&) const = default;
};

/// Parameters of one synthetic pattern family.
struct SynthClassParams {
  int shape = 0;  ///< 0 disk, 1 square, 2 cross, 3 ring, 4 bar, 5 diagonal, 6 triangle, 7 dots
  std::array<double, 3> foreground{};
  std::array<double, 3> background{};
  double texture_frequency = 1.0;  ///< grating cycles per image
  double texture_angle = 0.0;
  double size = 5.0;    ///< nominal radius in pixels
  double jitter = 2.0;  ///< max centre offset in pixels
  std::uint64_t seed = 0;

  bool operator==(const SynthClassParams&) const = default;
};

struct ClassDescriptor {
  int global_id = 0;
  std::size_t sample_count = 0;
  std::optional<SynthClassParams> synth;  ///< set for generated classes
  std::size_t raw_offset = 0;             ///< first image index in the raw blob otherwise

  bool operator==(const ClassDescriptor&) const = default;
};

/// Classes of one split. Images are either generated on demand or read from a u8 blob.
class ClassPool {
 public:
  ClassPool() = default;
  ClassPool(Split split, int channels, int height, int width, std::vector<ClassDescriptor> classes,
            std::shared_ptr<const std::vector<std::uint8_t>> pixels = nullptr);

  Split split() const { return split_; }
  int channels() const { return channels_; }
  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t image_size() const { return static_cast<std::size_t>(channels_ * height_ * width_); }
  std::size_t class_count() const { return classes_.size(); }
  const std::vector<ClassDescriptor>& classes() const { return classes_; }
  const ClassDescriptor& descriptor(std::size_t index) const { return classes_.at(index); }

  /// Pixel values in [0, 1], CHW order, written to dst (image_size() entries).
  void load_image(std::size_t class_index, std::size_t sample, std::span<double> dst) const;

 private:
  Split split_ = Split::kMetaTrain;
  int channels_ = 0;
  int height_ = 0;
  int width_ = 0;
  std::vector<ClassDescriptor> classes_;
  std::shared_ptr<const std::vector<std::uint8_t>> pixels_;
};

struct PoolSet {
  ClassPool train;
  ClassPool val;
  ClassPool test;

  const ClassPool& get(Split split) const;
};

struct SynthOptions {
  int train_classes = 20;
  int val_classes = 5;
  int test_classes = 20;
  int image_size = 16;
  int channels = 3;
  std::size_t samples_per_class = 100;

  bool operator==(const SynthOptions&) const = default;
};

/// Deterministic synthetic class families for all three splits.
PoolSet synth_class_pool(std::uint64_t seed, const SynthOptions& options = {});

/// Renders one sample of a synthetic class. Exposed for fixture export and tests.
void render_synthetic(const SynthClassParams& params, std::size_t sample, int channels, int height, int width,
                      std::span<double> dst);

/// Reads a manifest + little-endian u8 blob ([count, C, H, W]).
PoolSet load_raw_dataset(const std::filesystem::path& manifest_path);

/// Writes all three pools in the raw format, quantising pixels to u8. Returns bytes written to the blob.
std::size_t export_raw_dataset(const PoolSet& pools, const std::filesystem::path& manifest_path,
                               const std::string& blob_name = "images.u8");

struct Batch {
  Tensor images;  ///< [B, C, H, W]
  std::vector<int> labels;
};

struct TaskEpisode {
  Batch support;
  Batch query;
  std::vector<int> class_ids;  ///< global class ids; label i corresponds to class_ids[i]
  std::vector<std::vector<std::size_t>> support_samples;  ///< per label, sample indices used
  std::vector<std::vector<std::size_t>> query_samples;
};

/// Builds an episode from the given pool class indices (label i = classes[i]).
TaskEpisode episode_for_classes(const ClassPool& pool, const EpisodeSpec& spec, std::span<const std::size_t> classes,
                                std::uint64_t seed);

/// N classes without replacement, then K support + Q query samples per class without overlap.
TaskEpisode sample_episode(const ClassPool& pool, const EpisodeSpec& spec, std::uint64_t seed);

/// Lexicographic list of every N-subset of the pool's classes (indices into the pool).
std::vector<std::vector<std::size_t>> enumerate_test_tasks(const ClassPool& pool, const EpisodeSpec& spec);

/// One task of an enumerated or sampled list: which classes, and the seed for its samples.
struct TaskRef {
  std::vector<std::size_t> classes;
  std::uint64_t seed = 0;
};

/// Enumerated tasks with per-combination seeds derived from `seed` and the combination index.
std::vector<TaskRef> enumerated_task_refs(const ClassPool& pool, const EpisodeSpec& spec, std::uint64_t seed);
/// `count` random tasks.
std::vector<TaskRef> sampled_task_refs(const ClassPool& pool, const EpisodeSpec& spec, std::size_t count,
                                       std::uint64_t seed);
TaskEpisode make_episode(const ClassPool& pool, const EpisodeSpec& spec, const TaskRef& ref);

/// Stateless seed mixing (splitmix64 finaliser over the inputs).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0);

std::uint64_t binomial(std::uint64_t n, std::uint64_t k);

}  // namespace metadock::tasks
