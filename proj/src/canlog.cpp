#include "canids/canlog.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "canids/common.hpp"
#include "json.hpp"

namespace canids::canlog {

namespace {

bool is_sep(char c) { return c == ' ' || c == '\t' || c == ',' || c == '\r'; }

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && is_sep(line[i])) ++i;
    std::size_t start = i;
    while (i < line.size() && !is_sep(line[i])) ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

std::uint32_t parse_hex(std::string_view text, std::size_t line_no, const std::string& field) {
  std::uint32_t value = 0;
  if (text.empty()) throw ParseError(ParseErrorKind::NonHex, line_no, field, "empty hex field");
  for (char c : text) {
    int digit;
    if (c >= '0' && c <= '9')
      digit = c - '0';
    else if (c >= 'a' && c <= 'f')
      digit = c - 'a' + 10;
    else if (c >= 'A' && c <= 'F')
      digit = c - 'A' + 10;
    else
      throw ParseError(ParseErrorKind::NonHex, line_no, field,
                       "non-hex character '" + std::string(1, c) + "'");
    value = value * 16 + static_cast<std::uint32_t>(digit);
    if (value > 0xffffff) break;  // overflow guard; range-checked by caller
  }
  return value;
}

}  // namespace

CanRecord parse_line(std::string_view line, std::size_t line_no) {
  auto fields = split_fields(line);
  if (fields.size() < 4)
    throw ParseError(ParseErrorKind::FieldCount, line_no, "record",
                     "expected timestamp, id, dlc, data..., label; got " +
                         std::to_string(fields.size()) + " fields");

  CanRecord rec;

  {
    const auto& f = fields[0];
    double ts = 0.0;
    auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), ts);
    if (ec != std::errc() || ptr != f.data() + f.size() || !(ts >= 0.0) || !std::isfinite(ts))
      throw ParseError(ParseErrorKind::BadTimestamp, line_no, "timestamp",
                       "not a non-negative decimal: '" + std::string(f) + "'");
    rec.timestamp = ts;
  }

  {
    std::uint32_t id = parse_hex(fields[1], line_no, "id");
    if (id >= 2048)
      throw ParseError(ParseErrorKind::IdRange, line_no, "id",
                       "arbitration id " + std::to_string(id) + " exceeds 11 bits");
    rec.can_id = static_cast<std::uint16_t>(id);
  }

  {
    const auto& f = fields[2];
    unsigned dlc = 0;
    auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), dlc);
    if (ec != std::errc() || ptr != f.data() + f.size())
      throw ParseError(ParseErrorKind::DlcRange, line_no, "dlc",
                       "not a decimal count: '" + std::string(f) + "'");
    if (dlc > 8)
      throw ParseError(ParseErrorKind::DlcRange, line_no, "dlc",
                       "dlc " + std::to_string(dlc) + " exceeds 8");
    rec.dlc = static_cast<std::uint8_t>(dlc);
  }

  std::size_t expected = 4 + rec.dlc;
  if (fields.size() != expected)
    throw ParseError(ParseErrorKind::DlcDataMismatch, line_no, "data",
                     std::to_string(rec.dlc) + " declared, " +
                         std::to_string(fields.size() - 4) + " present");

  for (int i = 0; i < rec.dlc; ++i) {
    std::string field = "data[" + std::to_string(i) + "]";
    std::uint32_t byte = parse_hex(fields[static_cast<std::size_t>(3 + i)], line_no, field);
    if (byte > 0xff)
      throw ParseError(ParseErrorKind::NonHex, line_no, field, "byte value exceeds ff");
    rec.data[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(byte);
  }

  {
    const auto& f = fields.back();
    if (f == "R")
      rec.label = Label::Normal;
    else if (f == "T")
      rec.label = Label::Attack;
    else
      throw ParseError(ParseErrorKind::BadLabel, line_no, "label",
                       "expected R or T, got '" + std::string(f) + "'");
  }

  return rec;
}

std::vector<CanRecord> parse_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in)
    throw ParseError(ParseErrorKind::Io, 0, "file", "cannot open '" + path.string() + "'");
  std::vector<CanRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (split_fields(line).empty()) continue;  // blank line
    records.push_back(parse_line(line, line_no));
  }
  if (in.bad())
    throw ParseError(ParseErrorKind::Io, line_no, "file", "read error in '" + path.string() + "'");
  return records;
}

std::string format_record(const CanRecord& rec) {
  char head[64];
  std::snprintf(head, sizeof(head), "%.6f %04x %d", rec.timestamp, rec.can_id, rec.dlc);
  std::string out = head;
  for (int i = 0; i < rec.dlc; ++i) {
    char byte[8];
    std::snprintf(byte, sizeof(byte), " %02x", rec.data[static_cast<std::size_t>(i)]);
    out += byte;
  }
  out += rec.label == Label::Normal ? " R" : " T";
  return out;
}

void write_file(std::span<const CanRecord> records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out)
    throw ParseError(ParseErrorKind::Io, 0, "file", "cannot create '" + path.string() + "'");
  for (const auto& rec : records) out << format_record(rec) << '\n';
  out.flush();
  if (!out)
    throw ParseError(ParseErrorKind::Io, 0, "file", "write error in '" + path.string() + "'");
}

std::string_view attack_kind_name(AttackKind kind) {
  switch (kind) {
    case AttackKind::None: return "none";
    case AttackKind::DoS: return "dos";
    case AttackKind::Fuzzy: return "fuzzy";
    case AttackKind::Malfunction: return "malfunction";
  }
  return "none";
}

AttackKind attack_kind_from_name(std::string_view name) {
  if (name == "none") return AttackKind::None;
  if (name == "dos") return AttackKind::DoS;
  if (name == "fuzzy") return AttackKind::Fuzzy;
  if (name == "malfunction") return AttackKind::Malfunction;
  throw DataError("unknown attack kind '" + std::string(name) + "'");
}

namespace {

void validate_spec(const TrafficSpec& spec) {
  if (!(spec.duration > 0.0)) throw DataError("traffic spec: duration must be positive");
  if (spec.normal_ids.empty()) throw DataError("traffic spec: normal_ids must not be empty");
  for (const auto& n : spec.normal_ids) {
    if (!(n.period > 0.0)) throw DataError("traffic spec: normal period must be positive");
    if (n.can_id >= 2048) throw DataError("traffic spec: normal id exceeds 11 bits");
  }
  if (spec.attack_kind == AttackKind::DoS) {
    if (spec.dos.flood_id > 7) throw DataError("traffic spec: DoS flood id must be <= 7");
    if (!(spec.dos.gap > 0.0)) throw DataError("traffic spec: DoS gap must be positive");
  }
  if (spec.attack_kind == AttackKind::Fuzzy && !(spec.fuzzy.rate > 0.0))
    throw DataError("traffic spec: fuzzy rate must be positive");
  if (spec.attack_kind == AttackKind::Malfunction) {
    if (!(spec.malfunction.interval > 0.0))
      throw DataError("traffic spec: malfunction interval must be positive");
    if (spec.malfunction.target_id >= 2048)
      throw DataError("traffic spec: malfunction target id exceeds 11 bits");
  }
}

CanRecord make_from_template(double t, std::uint16_t id, const PayloadTemplate& tpl,
                             std::uint32_t counter, Rng& rng, Label label) {
  CanRecord rec;
  rec.timestamp = t;
  rec.can_id = id;
  rec.dlc = std::min<std::uint8_t>(tpl.dlc, 8);
  rec.data = tpl.bytes;
  if (tpl.counter_byte >= 0 && tpl.counter_byte < rec.dlc)
    rec.data[static_cast<std::size_t>(tpl.counter_byte)] = static_cast<std::uint8_t>(counter & 0xff);
  if (tpl.noise_byte >= 0 && tpl.noise_byte < rec.dlc)
    rec.data[static_cast<std::size_t>(tpl.noise_byte)] = rng.byte();
  rec.label = label;
  return rec;
}

double quantize_us(double t) { return std::round(t * 1e6) / 1e6; }

}  // namespace

std::vector<CanRecord> synthesize(const TrafficSpec& spec) {
  validate_spec(spec);

  // One RNG stream per traffic source keeps streams independent of each
  // other's draw counts, so e.g. changing the attack kind never reshuffles
  // the normal traffic.
  Rng seeder(spec.seed);
  std::vector<CanRecord> records;

  std::uint32_t stream_index = 0;
  for (const auto& n : spec.normal_ids) {
    Rng rng(seeder.fork() ^ stream_index++);
    double phase = n.period * rng.uniform();
    std::uint32_t counter = 0;
    if (n.jitter > 0.0) {
      double t = phase;
      while (t < spec.duration) {
        records.push_back(make_from_template(quantize_us(t), n.can_id, n.payload, counter++, rng,
                                             Label::Normal));
        t += n.period * (1.0 + rng.uniform(-n.jitter, n.jitter));
      }
    } else {
      // jitter-free streams use k*period to keep counts exact
      for (std::uint64_t k = 0;; ++k) {
        double t = phase + static_cast<double>(k) * n.period;
        if (t >= spec.duration) break;
        records.push_back(make_from_template(quantize_us(t), n.can_id, n.payload, counter++, rng,
                                             Label::Normal));
      }
    }
  }

  Rng attack_rng(seeder.fork() ^ 0xa77ac4u);
  switch (spec.attack_kind) {
    case AttackKind::None:
      break;
    case AttackKind::DoS: {
      std::uint32_t counter = 0;
      for (std::uint64_t k = 0;; ++k) {
        double t = static_cast<double>(k) * spec.dos.gap;
        if (t >= spec.duration) break;
        records.push_back(make_from_template(quantize_us(t), spec.dos.flood_id, spec.dos.payload,
                                             counter++, attack_rng, Label::Attack));
      }
      break;
    }
    case AttackKind::Fuzzy: {
      double t = 0.0;
      while (true) {
        // exponential inter-arrival at the configured rate
        t += -std::log(1.0 - attack_rng.uniform()) / spec.fuzzy.rate;
        if (t >= spec.duration) break;
        CanRecord rec;
        rec.timestamp = quantize_us(t);
        rec.can_id = static_cast<std::uint16_t>(attack_rng.below(2048));
        rec.dlc = static_cast<std::uint8_t>(attack_rng.below(9));
        for (int i = 0; i < rec.dlc; ++i) rec.data[static_cast<std::size_t>(i)] = attack_rng.byte();
        rec.label = Label::Attack;
        records.push_back(rec);
      }
      break;
    }
    case AttackKind::Malfunction: {
      PayloadTemplate tpl = spec.malfunction.payload;
      tpl.dlc = 8;  // malfunction injections always carry 8 data bytes
      std::uint32_t counter = 0;
      for (std::uint64_t k = 1;; ++k) {
        double t = static_cast<double>(k) * spec.malfunction.interval;
        if (t >= spec.duration) break;
        records.push_back(make_from_template(quantize_us(t), spec.malfunction.target_id, tpl,
                                             counter++, attack_rng, Label::Attack));
      }
      break;
    }
  }

  std::stable_sort(records.begin(), records.end(),
                   [](const CanRecord& a, const CanRecord& b) { return a.timestamp < b.timestamp; });
  return records;
}

namespace {

using nlohmann::json;

PayloadTemplate payload_from_json(const json& j) {
  PayloadTemplate tpl;
  std::string hex = j.value("payload", std::string());
  std::size_t count = 0;
  std::uint32_t current = 0;
  int digits = 0;
  for (char c : hex + " ") {
    if (c == ' ' || c == ':') {
      if (digits > 0 && count < 8) tpl.bytes[count++] = static_cast<std::uint8_t>(current);
      current = 0;
      digits = 0;
      continue;
    }
    int d;
    if (c >= '0' && c <= '9')
      d = c - '0';
    else if (c >= 'a' && c <= 'f')
      d = c - 'a' + 10;
    else if (c >= 'A' && c <= 'F')
      d = c - 'A' + 10;
    else
      throw DataError("traffic spec: bad payload hex '" + hex + "'");
    current = current * 16 + static_cast<std::uint32_t>(d);
    ++digits;
  }
  tpl.dlc = static_cast<std::uint8_t>(j.value("dlc", static_cast<int>(count)));
  tpl.counter_byte = j.value("counter_byte", -1);
  tpl.noise_byte = j.value("noise_byte", -1);
  return tpl;
}

json payload_to_json(const PayloadTemplate& tpl) {
  std::string hex;
  for (int i = 0; i < tpl.dlc; ++i) {
    char b[4];
    std::snprintf(b, sizeof(b), "%02x", tpl.bytes[static_cast<std::size_t>(i)]);
    if (!hex.empty()) hex += ' ';
    hex += b;
  }
  json j{{"payload", hex}, {"dlc", tpl.dlc}};
  if (tpl.counter_byte >= 0) j["counter_byte"] = tpl.counter_byte;
  if (tpl.noise_byte >= 0) j["noise_byte"] = tpl.noise_byte;
  return j;
}

}  // namespace

TrafficSpec traffic_spec_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    throw DataError(std::string("traffic spec: invalid json: ") + e.what());
  }
  TrafficSpec spec;
  spec.duration = j.value("duration", 0.0);
  spec.seed = j.value("seed", std::uint64_t{0});
  for (const auto& n : j.value("normal_ids", json::array())) {
    NormalIdSpec id;
    id.can_id = static_cast<std::uint16_t>(n.value("id", 0));
    id.period = n.value("period", 0.0);
    id.jitter = n.value("jitter", 0.02);
    id.payload = payload_from_json(n);
    spec.normal_ids.push_back(id);
  }
  json attack = j.value("attack", json::object());
  spec.attack_kind = attack_kind_from_name(attack.value("kind", "none"));
  switch (spec.attack_kind) {
    case AttackKind::DoS:
      spec.dos.flood_id = static_cast<std::uint16_t>(attack.value("flood_id", 0));
      spec.dos.gap = attack.value("gap", 0.0);
      spec.dos.payload = payload_from_json(attack);
      break;
    case AttackKind::Fuzzy:
      spec.fuzzy.rate = attack.value("rate", 0.0);
      break;
    case AttackKind::Malfunction:
      spec.malfunction.target_id = static_cast<std::uint16_t>(attack.value("target_id", 0));
      spec.malfunction.interval = attack.value("interval", 0.0);
      spec.malfunction.payload = payload_from_json(attack);
      break;
    case AttackKind::None:
      break;
  }
  validate_spec(spec);
  return spec;
}

std::string traffic_spec_to_json_text(const TrafficSpec& spec) {
  json j;
  j["duration"] = spec.duration;
  j["seed"] = spec.seed;
  j["normal_ids"] = json::array();
  for (const auto& n : spec.normal_ids) {
    json id = payload_to_json(n.payload);
    id["id"] = n.can_id;
    id["period"] = n.period;
    id["jitter"] = n.jitter;
    j["normal_ids"].push_back(id);
  }
  json attack{{"kind", std::string(attack_kind_name(spec.attack_kind))}};
  switch (spec.attack_kind) {
    case AttackKind::DoS: {
      json p = payload_to_json(spec.dos.payload);
      attack.update(p);
      attack["flood_id"] = spec.dos.flood_id;
      attack["gap"] = spec.dos.gap;
      break;
    }
    case AttackKind::Fuzzy:
      attack["rate"] = spec.fuzzy.rate;
      break;
    case AttackKind::Malfunction: {
      json p = payload_to_json(spec.malfunction.payload);
      attack.update(p);
      attack["target_id"] = spec.malfunction.target_id;
      attack["interval"] = spec.malfunction.interval;
      break;
    }
    case AttackKind::None:
      break;
  }
  j["attack"] = attack;
  return j.dump(2);
}

TrafficSpec load_traffic_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open traffic spec '" + path.string() + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return traffic_spec_from_json_text(buffer.str());
}

}  // namespace canids::canlog
