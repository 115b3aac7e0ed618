#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace canids::canlog {

enum class Label : std::uint8_t { Normal = 0, Attack = 1 };

// One parsed line of a CAN capture: timestamp, 11-bit arbitration ID, DLC,
// up to 8 data bytes, and the normal/attack label.
struct CanRecord {
  double timestamp = 0.0;             // seconds, microsecond precision
  std::uint16_t can_id = 0;           // [0, 2047]
  std::uint8_t dlc = 0;               // [0, 8]
  std::array<std::uint8_t, 8> data{};  // first `dlc` entries are meaningful
  Label label = Label::Normal;

  std::span<const std::uint8_t> bytes() const { return {data.data(), dlc}; }

  friend bool operator==(const CanRecord& a, const CanRecord& b) {
    if (a.timestamp != b.timestamp || a.can_id != b.can_id || a.dlc != b.dlc ||
        a.label != b.label)
      return false;
    for (int i = 0; i < a.dlc; ++i)
      if (a.data[static_cast<std::size_t>(i)] != b.data[static_cast<std::size_t>(i)]) return false;
    return true;
  }
};

enum class ParseErrorKind {
  FieldCount,
  BadTimestamp,
  NonHex,
  IdRange,
  DlcRange,
  DlcDataMismatch,
  BadLabel,
  Io,
};

class ParseError : public std::runtime_error {
 public:
  ParseError(ParseErrorKind kind, std::size_t line, std::string field, std::string message)
      : std::runtime_error("line " + std::to_string(line) + ", " + field + ": " + message),
        kind_(kind),
        line_(line),
        field_(std::move(field)) {}

  ParseErrorKind kind() const { return kind_; }
  std::size_t line() const { return line_; }
  const std::string& field() const { return field_; }

 private:
  ParseErrorKind kind_;
  std::size_t line_;
  std::string field_;
};

// Parses one log line: timestamp, 4-hex-digit ID, DLC, DLC data bytes, R|T.
// Fields may be separated by runs of spaces, tabs, or commas.
CanRecord parse_line(std::string_view line, std::size_t line_no = 1);

std::vector<CanRecord> parse_file(const std::filesystem::path& path);

// Canonical single-line rendering: 6-decimal timestamp, zero-padded 4-digit
// hex ID, DLC, 2-digit hex bytes, R|T, single spaces.
std::string format_record(const CanRecord& record);

void write_file(std::span<const CanRecord> records, const std::filesystem::path& path);

enum class AttackKind : std::uint8_t { None = 0, DoS = 1, Fuzzy = 2, Malfunction = 3 };

std::string_view attack_kind_name(AttackKind kind);
AttackKind attack_kind_from_name(std::string_view name);

// Payload template for synthetic traffic. `counter_byte` (if >= 0) marks a
// byte that increments by one per message, wrapping at 256; `noise_byte`
// (if >= 0) marks a byte drawn uniformly at random per message.
struct PayloadTemplate {
  std::array<std::uint8_t, 8> bytes{};
  std::uint8_t dlc = 8;
  int counter_byte = -1;
  int noise_byte = -1;
};

struct NormalIdSpec {
  std::uint16_t can_id = 0;
  double period = 0.0;        // seconds between messages
  PayloadTemplate payload;
  double jitter = 0.02;       // +/- fraction of the period
};

struct DosParams {
  std::uint16_t flood_id = 0;  // must be <= 7
  double gap = 0.0;            // seconds between flood messages
  PayloadTemplate payload;
};

struct FuzzyParams {
  double rate = 0.0;  // injected messages per second (exponential gaps)
};

struct MalfunctionParams {
  std::uint16_t target_id = 0;
  double interval = 0.0;
  PayloadTemplate payload;  // dlc forced to 8
};

struct TrafficSpec {
  double duration = 0.0;
  std::vector<NormalIdSpec> normal_ids;
  AttackKind attack_kind = AttackKind::None;
  DosParams dos;
  FuzzyParams fuzzy;
  MalfunctionParams malfunction;
  std::uint64_t seed = 0;
};

// Generates a deterministic log: periodic normal traffic per ID with the
// configured attack interleaved by timestamp. Identical specs (including
// seed) produce identical record sequences.
std::vector<CanRecord> synthesize(const TrafficSpec& spec);

TrafficSpec traffic_spec_from_json_text(const std::string& text);
std::string traffic_spec_to_json_text(const TrafficSpec& spec);
TrafficSpec load_traffic_spec(const std::filesystem::path& path);

}  // namespace canids::canlog
