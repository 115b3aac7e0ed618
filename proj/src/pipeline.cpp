#include "canids/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <unordered_map>

#include "canids/common.hpp"

namespace canids::pipeline {

std::uint16_t decode_can_id(const FeatureVector& fv) {
  std::uint16_t id = 0;
  for (int i = 0; i < kIdBitCount; ++i)
    id = static_cast<std::uint16_t>((id << 1) | (fv.f[static_cast<std::size_t>(i)] >= 0.5f ? 1 : 0));
  return id;
}

void Dataset::append(std::vector<LabeledSample> s, canlog::AttackKind kind, std::uint16_t block_id) {
  origin.insert(origin.end(), s.size(), kind);
  block.insert(block.end(), s.size(), block_id);
  samples.insert(samples.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
}

std::size_t Dataset::count_label(std::uint8_t label) const {
  std::size_t n = 0;
  for (const auto& s : samples) n += (s.label == label);
  return n;
}

std::vector<LabeledSample> encode_records(std::span<const canlog::CanRecord> records) {
  std::vector<LabeledSample> out;
  out.reserve(records.size());
  std::unordered_map<std::uint16_t, double> last_seen;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& rec = records[i];
    LabeledSample s;
    for (int b = 0; b < kIdBitCount; ++b)
      s.features.f[static_cast<std::size_t>(b)] =
          static_cast<float>((rec.can_id >> (kIdBitCount - 1 - b)) & 1);
    s.features.f[kDlcIndex] = static_cast<float>(rec.dlc);
    for (int byte = 0; byte < 8; ++byte) {
      std::uint8_t value = byte < rec.dlc ? rec.data[static_cast<std::size_t>(byte)] : 0;
      for (int bit = 0; bit < 8; ++bit)
        s.features.f[static_cast<std::size_t>(kDataBitsBegin + byte * 8 + bit)] =
            static_cast<float>((value >> (7 - bit)) & 1);
    }
    double dtime = 0.0;
    auto it = last_seen.find(rec.can_id);
    if (it != last_seen.end()) dtime = rec.timestamp - it->second;
    if (dtime < 0.0) dtime = 0.0;  // out-of-order logs clamp to 0
    if (dtime > kDtimeMax) dtime = kDtimeMax;
    s.features.f[kDtimeIndex] = static_cast<float>(dtime);
    last_seen[rec.can_id] = rec.timestamp;
    s.label = rec.label == canlog::Label::Attack ? 1 : 0;
    s.source_index = static_cast<std::uint32_t>(i);
    out.push_back(s);
  }
  return out;
}

std::vector<LabeledSample> rebalance(std::span<const LabeledSample> samples, std::uint64_t seed) {
  std::size_t attack = 0, normal = 0;
  for (const auto& s : samples) (s.label ? attack : normal)++;
  if (attack == 0 || normal == 0)
    throw DataError("rebalance: need both classes present (normal=" + std::to_string(normal) +
                    ", attack=" + std::to_string(attack) + ")");
  if (attack == normal) return {samples.begin(), samples.end()};

  std::uint8_t majority = attack > normal ? 1 : 0;
  std::size_t keep = std::min(attack, normal);

  std::vector<std::uint32_t> majority_idx;
  for (std::uint32_t i = 0; i < samples.size(); ++i)
    if (samples[i].label == majority) majority_idx.push_back(i);

  Rng rng(seed);
  rng.shuffle(majority_idx);
  majority_idx.resize(keep);
  std::sort(majority_idx.begin(), majority_idx.end());

  std::vector<LabeledSample> out;
  out.reserve(keep * 2);
  std::size_t next = 0;
  for (std::uint32_t i = 0; i < samples.size(); ++i) {
    if (samples[i].label != majority) {
      out.push_back(samples[i]);
    } else if (next < majority_idx.size() && majority_idx[next] == i) {
      out.push_back(samples[i]);
      ++next;
    }
  }
  return out;
}

std::vector<Frame> window_frames(std::span<const LabeledSample> samples, int width, int stride) {
  std::vector<Frame> frames;
  if (width <= 0 || stride <= 0) throw DataError("window_frames: width and stride must be positive");
  if (samples.size() < static_cast<std::size_t>(width)) return frames;
  int attacks = 0;
  for (int i = 0; i < width; ++i) attacks += samples[static_cast<std::size_t>(i)].label;
  for (std::size_t begin = 0;; begin += static_cast<std::size_t>(stride)) {
    if (begin + static_cast<std::size_t>(width) > samples.size()) break;
    if (begin > 0) {
      // roll the attack count across the stride
      for (std::size_t i = begin - static_cast<std::size_t>(stride); i < begin; ++i)
        attacks -= samples[i].label;
      for (std::size_t i = begin + static_cast<std::size_t>(width) - static_cast<std::size_t>(stride);
           i < begin + static_cast<std::size_t>(width); ++i)
        attacks += samples[i].label;
    }
    Frame f;
    f.begin = static_cast<std::uint32_t>(begin);
    f.label = attacks >= kFrameAttackThreshold ? 1 : 0;
    frames.push_back(f);
  }
  return frames;
}

std::vector<Frame> window_frames_blocked(const Dataset& data, int width, int stride) {
  std::vector<Frame> frames;
  std::size_t run_begin = 0;
  for (std::size_t i = 1; i <= data.samples.size(); ++i) {
    if (i == data.samples.size() || data.block[i] != data.block[run_begin]) {
      auto run = std::span<const LabeledSample>(data.samples).subspan(run_begin, i - run_begin);
      for (Frame f : window_frames(run, width, stride)) {
        f.begin += static_cast<std::uint32_t>(run_begin);
        frames.push_back(f);
      }
      run_begin = i;
    }
  }
  return frames;
}

SplitDatasets split_abc(const Dataset& data, std::uint64_t seed) {
  if (data.size() < 10) throw DataError("split_abc: need at least 10 samples");

  // Stratified assignment: shuffle each class, round its 60/20/20 allocation
  // so the per-class parts sum exactly, then keep input order inside splits.
  std::vector<std::uint32_t> by_class[2];
  for (std::uint32_t i = 0; i < data.size(); ++i)
    by_class[data.samples[i].label ? 1 : 0].push_back(i);

  Rng rng(seed);
  std::vector<std::uint8_t> assign(data.size(), 0);  // 0=A 1=B 2=C
  for (auto& idx : by_class) {
    if (idx.empty()) continue;
    rng.shuffle(idx);
    std::size_t n = idx.size();
    auto n_a = static_cast<std::size_t>(std::llround(0.6 * static_cast<double>(n)));
    auto n_b = static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(n)));
    if (n_a + n_b > n) n_b = n - n_a;
    for (std::size_t i = 0; i < n; ++i)
      assign[idx[i]] = i < n_a ? 0 : (i < n_a + n_b ? 1 : 2);
  }

  SplitDatasets split;
  split.seed = seed;
  Dataset* parts[3] = {&split.a, &split.b, &split.c};
  for (std::uint32_t i = 0; i < data.size(); ++i) {
    Dataset* part = parts[assign[i]];
    part->samples.push_back(data.samples[i]);
    part->origin.push_back(data.origin.empty() ? canlog::AttackKind::None : data.origin[i]);
    part->block.push_back(data.block.empty() ? 0 : data.block[i]);
  }
  return split;
}

namespace {

void format_feature(std::string& out, float v) {
  // Bit features print as bare 0/1; dlc/dtime keep six decimals.
  if (v == 0.0f) {
    out += '0';
  } else if (v == 1.0f) {
    out += '1';
  } else {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6g", static_cast<double>(v));
    out += buf;
  }
}

}  // namespace

void write_dataset(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot create dataset file '" + path.string() + "'");
  std::string header;
  for (int b = 0; b < kIdBitCount; ++b) header += "id_bit" + std::to_string(b) + ",";
  header += "dlc,";
  for (int b = 0; b < kDataBitCount; ++b) header += "data_bit" + std::to_string(b) + ",";
  header += "dtime,label,origin,block,source_index";
  out << header << '\n';
  std::string line;
  for (std::size_t i = 0; i < data.size(); ++i) {
    line.clear();
    const auto& s = data.samples[i];
    for (float v : s.features.f) {
      format_feature(line, v);
      line += ',';
    }
    line += std::to_string(static_cast<int>(s.label));
    line += ',';
    line += canlog::attack_kind_name(data.origin.empty() ? canlog::AttackKind::None : data.origin[i]);
    line += ',';
    line += std::to_string(data.block.empty() ? 0 : data.block[i]);
    line += ',';
    line += std::to_string(s.source_index);
    out << line << '\n';
  }
  if (!out) throw DataError("write error in dataset file '" + path.string() + "'");
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset file '" + path.string() + "'");
  Dataset data;
  std::string line;
  if (!std::getline(in, line)) throw DataError("dataset file '" + path.string() + "' is empty");
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    LabeledSample s;
    const char* p = line.data();
    const char* end = line.data() + line.size();
    auto next_field = [&](const char* what) {
      if (p > end) throw DataError("dataset '" + path.string() + "' line " + std::to_string(line_no) +
                                   ": missing field " + what);
      const char* comma = std::find(p, end, ',');
      std::string_view field(p, static_cast<std::size_t>(comma - p));
      p = comma < end ? comma + 1 : end + 1;
      return field;
    };
    for (int f = 0; f < kFeatureCount; ++f) {
      auto field = next_field("feature");
      float v = 0.0f;
      auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
      if (ec != std::errc() || ptr != field.data() + field.size())
        throw DataError("dataset '" + path.string() + "' line " + std::to_string(line_no) +
                        ": bad feature value '" + std::string(field) + "'");
      s.features.f[static_cast<std::size_t>(f)] = v;
    }
    auto label = next_field("label");
    if (label == "0")
      s.label = 0;
    else if (label == "1")
      s.label = 1;
    else
      throw DataError("dataset '" + path.string() + "' line " + std::to_string(line_no) +
                      ": bad label '" + std::string(label) + "'");
    auto origin = next_field("origin");
    auto block = next_field("block");
    auto source = next_field("source_index");
    int block_v = 0, source_v = 0;
    std::from_chars(block.data(), block.data() + block.size(), block_v);
    std::from_chars(source.data(), source.data() + source.size(), source_v);
    s.source_index = static_cast<std::uint32_t>(source_v);
    data.samples.push_back(s);
    data.origin.push_back(canlog::attack_kind_from_name(origin));
    data.block.push_back(static_cast<std::uint16_t>(block_v));
  }
  return data;
}

}  // namespace canids::pipeline
