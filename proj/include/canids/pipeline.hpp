#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "canids/canlog.hpp"

namespace canids::pipeline {

// Canonical 77-feature layout: 11 arbitration-id bits (MSB first), DLC,
// 64 data bits (byte 0 MSB through byte 7 LSB), delta-time.
inline constexpr int kIdBitCount = 11;
inline constexpr int kIdBitsBegin = 0;
inline constexpr int kDlcIndex = 11;
inline constexpr int kDataBitsBegin = 12;
inline constexpr int kDataBitCount = 64;
inline constexpr int kDtimeIndex = 76;
inline constexpr int kFeatureCount = 77;
inline constexpr float kDlcMax = 8.0f;
inline constexpr float kDtimeMax = 100.0f;

struct FeatureVector {
  std::array<float, kFeatureCount> f{};

  std::span<const float> id_bits() const { return {f.data(), kIdBitCount}; }
  float dlc() const { return f[kDlcIndex]; }
  std::span<const float> data_bits() const { return {f.data() + kDataBitsBegin, kDataBitCount}; }
  float dtime() const { return f[kDtimeIndex]; }

  friend bool operator==(const FeatureVector& a, const FeatureVector& b) { return a.f == b.f; }
};

// Reads the arbitration id back out of the (possibly perturbed) bit features;
// bits are rounded to the nearest of {0,1}.
std::uint16_t decode_can_id(const FeatureVector& fv);

struct LabeledSample {
  FeatureVector features;
  std::uint8_t label = 0;          // 0 normal, 1 attack
  std::uint32_t source_index = 0;  // position in the originating record stream
};

// A sample stream plus per-sample provenance. `origin` is the attack kind of
// the log each sample came from (None for a pure-normal capture); `block`
// numbers the source log so window/sequence views never span captures.
struct Dataset {
  std::vector<LabeledSample> samples;
  std::vector<canlog::AttackKind> origin;
  std::vector<std::uint16_t> block;

  std::size_t size() const { return samples.size(); }
  void append(std::vector<LabeledSample> s, canlog::AttackKind kind, std::uint16_t block_id);
  std::size_t count_label(std::uint8_t label) const;
};

// Encodes records in order. dTIME is the gap to the previous record with the
// same id (0 for the first occurrence), clamped to [0, 100]; data bytes past
// the DLC encode as zero bits.
std::vector<LabeledSample> encode_records(std::span<const canlog::CanRecord> records);

// Randomly under-samples the majority class to the minority count, keeping
// the survivors in their original order. Errors on single-class input.
std::vector<LabeledSample> rebalance(std::span<const LabeledSample> samples, std::uint64_t seed);

struct Frame {
  std::uint32_t begin = 0;  // index of the first sample in the window
  std::uint8_t label = 0;   // 1 iff the window holds >= 5 attack messages
};

inline constexpr int kFrameWidth = 29;
inline constexpr int kFrameAttackThreshold = 5;

// Sliding windows over a sample stream. Returns an empty sequence when there
// are fewer samples than the window width.
std::vector<Frame> window_frames(std::span<const LabeledSample> samples, int width = kFrameWidth,
                                 int stride = 1);

// Windows that never span block boundaries; frame.begin indexes into
// data.samples.
std::vector<Frame> window_frames_blocked(const Dataset& data, int width = kFrameWidth,
                                         int stride = 1);

struct SplitDatasets {
  Dataset a, b, c;
  std::uint64_t seed = 0;
};

// Stratified-by-label 60/20/20 random split; per-split order follows the
// input order, the three parts are disjoint, and their union is the input.
SplitDatasets split_abc(const Dataset& data, std::uint64_t seed);

// Dataset file: header line naming the columns, then one sample per line of
// 77 comma-separated features, the label, and the provenance columns.
void write_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

}  // namespace canids::pipeline
