#pragma once

// Message envelopes, the whitelist of shareable information kinds, and the
// communication-cost monitor that checks every transfer against budgets
// fixed from the registered model signature.

#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "hetfl/errors.hpp"
#include "hetfl/paramset.hpp"

namespace hetfl {

enum class MessageKind : std::uint8_t { Statistics = 0, Parameters = 1, AggregationWeight = 2, Gradients = 3, Control = 4 };

inline constexpr bool is_whitelisted(MessageKind k) noexcept { return static_cast<std::uint8_t>(k) <= 4; }

inline std::string kind_name(MessageKind k) {
  switch (k) {
    case MessageKind::Statistics: return "Statistics";
    case MessageKind::Parameters: return "Parameters";
    case MessageKind::AggregationWeight: return "AggregationWeight";
    case MessageKind::Gradients: return "Gradients";
    case MessageKind::Control: return "Control";
  }
  return "Unknown(" + std::to_string(static_cast<unsigned>(k)) + ")";
}

inline MessageKind parse_kind_name(std::string_view s) {
  for (std::uint8_t i = 0; i <= 4; ++i) {
    if (kind_name(static_cast<MessageKind>(i)) == s) return static_cast<MessageKind>(i);
  }
  if (s.starts_with("Unknown(") && s.ends_with(")")) {
    const int code = std::stoi(std::string(s.substr(8, s.size() - 9)));
    if (code < 0 || code > 255) throw Error("bad message kind code");
    return static_cast<MessageKind>(code);
  }
  throw Error("unknown message kind '" + std::string(s) + "'");
}

inline constexpr int kServerId = 0;

struct Message {
  MessageKind kind = MessageKind::Control;
  int sender = kServerId;
  int round = 0;
  std::vector<std::uint8_t> payload;  // canonical ParamSet serialization
  std::size_t declared_count = 0;
};

inline Message make_message(MessageKind kind, int sender, int round, const ParamSet& content) {
  return Message{kind, sender, round, serialize(content), content.element_count()};
}

enum class Verdict : std::uint8_t { Ok, NonWhitelistedKind, SizeMismatch, BudgetExceeded };

inline std::string_view to_string(Verdict v) {
  switch (v) {
    case Verdict::Ok: return "ok";
    case Verdict::NonWhitelistedKind: return "NonWhitelistedKind";
    case Verdict::SizeMismatch: return "SizeMismatch";
    case Verdict::BudgetExceeded: return "BudgetExceeded";
  }
  return "?";
}

inline Verdict parse_verdict(std::string_view s) {
  for (auto v : {Verdict::Ok, Verdict::NonWhitelistedKind, Verdict::SizeMismatch, Verdict::BudgetExceeded}) {
    if (to_string(v) == s) return v;
  }
  throw Error("unknown verdict '" + std::string(s) + "'");
}

// Per-kind element budgets. Parameters and Gradients are bounded by the
// shared parameter count, Statistics by count + mean + median (2d + 1),
// AggregationWeight by a single scalar; Control carries nothing.
struct Budgets {
  std::size_t statistics = 0;
  std::size_t parameters = 0;
  std::size_t aggregation_weight = 1;
  std::size_t gradients = 0;
  std::size_t control = 0;

  static Budgets for_signature(std::size_t shared_elements, std::size_t feature_dim) {
    return Budgets{2 * feature_dim + 1, shared_elements, 1, shared_elements, 0};
  }

  [[nodiscard]] std::size_t of(MessageKind k) const {
    switch (k) {
      case MessageKind::Statistics: return statistics;
      case MessageKind::Parameters: return parameters;
      case MessageKind::AggregationWeight: return aggregation_weight;
      case MessageKind::Gradients: return gradients;
      case MessageKind::Control: return control;
    }
    return 0;
  }
};

struct LogEntry {
  int round = 0;
  int sender = 0;
  MessageKind kind = MessageKind::Control;
  std::size_t declared = 0;
  std::size_t bytes = 0;
  Verdict verdict = Verdict::Ok;

  friend bool operator==(const LogEntry&, const LogEntry&) = default;
};

struct ProtocolViolation : Error {
  explicit ProtocolViolation(const LogEntry& e)
      : Error("protocol violation: " + std::string(to_string(e.verdict)) + " from sender " + std::to_string(e.sender) +
              " in round " + std::to_string(e.round) + " (" + kind_name(e.kind) + ", " + std::to_string(e.declared) +
              " declared elements)"),
        entry(e) {}
  LogEntry entry;
};

class ProtocolMonitor {
 public:
  explicit ProtocolMonitor(Budgets budgets) : budgets_(budgets) {}

  [[nodiscard]] const Budgets& budgets() const noexcept { return budgets_; }
  [[nodiscard]] const std::vector<LogEntry>& log() const noexcept { return log_; }

  [[nodiscard]] std::vector<LogEntry> violations() const {
    std::vector<LogEntry> out;
    for (const auto& e : log_) {
      if (e.verdict != Verdict::Ok) out.push_back(e);
    }
    return out;
  }

  // Cumulative payload bytes per kind code, over every attempted transfer.
  [[nodiscard]] const std::map<std::uint8_t, std::size_t>& bytes_by_kind() const noexcept { return bytes_; }

  // Checks, in order: whitelisted kind; payload element count (from its own
  // headers) equals the declared count; declared count within the kind's
  // budget. Every outcome is appended to the log.
  Verdict validate(const Message& msg) {
    Verdict v = Verdict::Ok;
    if (!is_whitelisted(msg.kind)) {
      v = Verdict::NonWhitelistedKind;
    } else {
      std::size_t actual = 0;
      bool well_formed = true;
      try {
        actual = payload_element_count(msg.payload);
      } catch (const SerializationError&) {
        well_formed = false;
      }
      if (!well_formed || actual != msg.declared_count) {
        v = Verdict::SizeMismatch;
      } else if (msg.declared_count > budgets_.of(msg.kind)) {
        v = Verdict::BudgetExceeded;
      }
    }
    log_.push_back(LogEntry{msg.round, msg.sender, msg.kind, msg.declared_count, msg.payload.size(), v});
    bytes_[static_cast<std::uint8_t>(msg.kind)] += msg.payload.size();
    return v;
  }

 private:
  Budgets budgets_;
  std::vector<LogEntry> log_;
  std::map<std::uint8_t, std::size_t> bytes_;
};

inline Verdict validate(const Message& msg, ProtocolMonitor& monitor) { return monitor.validate(msg); }

// ---- communication log --------------------------------------------------------
//
// One line per message: round, sender, kind, declared count, bytes, verdict,
// separated by tabs.

inline std::string format_log_line(const LogEntry& e) {
  std::ostringstream os;
  os << e.round << '\t' << e.sender << '\t' << kind_name(e.kind) << '\t' << e.declared << '\t' << e.bytes << '\t'
     << to_string(e.verdict);
  return os.str();
}

inline LogEntry parse_log_line(const std::string& line, std::size_t lineno) {
  std::vector<std::string> f;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, '\t')) f.push_back(cell);
  if (f.size() != 6) throw ParseError("expected 6 tab-separated fields", lineno);
  try {
    LogEntry e;
    e.round = std::stoi(f[0]);
    e.sender = std::stoi(f[1]);
    e.kind = parse_kind_name(f[2]);
    e.declared = static_cast<std::size_t>(std::stoull(f[3]));
    e.bytes = static_cast<std::size_t>(std::stoull(f[4]));
    e.verdict = parse_verdict(f[5]);
    return e;
  } catch (const std::exception& ex) {
    throw ParseError(ex.what(), lineno);
  }
}

inline void write_log(std::ostream& os, const std::vector<LogEntry>& log) {
  for (const auto& e : log) os << format_log_line(e) << '\n';
}

inline std::vector<LogEntry> read_log(std::istream& is) {
  std::vector<LogEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    out.push_back(parse_log_line(line, lineno));
  }
  return out;
}

struct CommunicationSummary {
  // round -> kind name -> payload bytes
  std::map<int, std::map<std::string, std::size_t>> bytes;
  std::map<int, std::map<std::string, std::size_t>> messages;
  std::vector<LogEntry> anomalies;
};

inline CommunicationSummary communication_summary(const std::vector<LogEntry>& log) {
  CommunicationSummary s;
  for (const auto& e : log) {
    s.bytes[e.round][kind_name(e.kind)] += e.bytes;
    s.messages[e.round][kind_name(e.kind)] += 1;
    if (e.verdict != Verdict::Ok) s.anomalies.push_back(e);
  }
  return s;
}

}  // namespace hetfl
