#pragma once

// The three command-line commands as library functions returning exit codes.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "hetfl/config.hpp"
#include "hetfl/evaluation.hpp"
#include "hetfl/protocol.hpp"
#include "hetfl/runtime.hpp"

namespace hetfl {

inline constexpr const char* kToolVersion = "0.1.0";

enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitProtocol = 2, kExitNumeric = 3 };

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

namespace detail {

inline void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw Error("cannot write " + p.string());
  os << content;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw ConfigError("cannot open " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline std::string history_text(const History& h) {
  std::ostringstream os;
  os << "round\tclient\ttrain_loss\tvalid_metric\n";
  for (const auto& r : h.rounds) {
    for (const auto& c : r.clients) {
      os << r.round << '\t' << c.client << '\t' << format_real(c.train_loss) << '\t' << format_real(c.valid_metric)
         << '\n';
    }
  }
  return os.str();
}

inline std::string log_text(const std::vector<LogEntry>& log) {
  std::ostringstream os;
  write_log(os, log);
  return os.str();
}

// Writes each file and a manifest listing their hashes.
inline void write_artifacts(const std::filesystem::path& dir, const std::map<std::string, std::string>& files,
                            std::uint64_t config_hash, std::uint64_t seed, const std::string& status) {
  std::filesystem::create_directories(dir);
  std::ostringstream m;
  m << "{\n  \"tool\": \"hetfl\",\n  \"version\": \"" << kToolVersion << "\",\n  \"config_hash\": \""
    << hex64(config_hash) << "\",\n  \"seed\": " << seed << ",\n  \"status\": \"" << status << "\",\n  \"files\": {";
  bool first = true;
  for (const auto& [name, content] : files) {
    write_file(dir / name, content);
    m << (first ? "\n" : ",\n") << "    \"" << name << "\": \"" << hex64(fnv1a64(content)) << "\"";
    first = false;
  }
  m << "\n  }\n}\n";
  write_file(dir / "manifest.json", m.str());
}

struct Moments {
  double mean = 0.0;
  double std = 0.0;
};

inline Moments moments(const std::vector<double>& v) {
  Moments m;
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0;
    for (double x : v) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return m;
}

}  // namespace detail

struct RunOptions {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

// Runs every repeat (seeds master+0, +1, ...) into <out>/seed_<s>/ and writes
// summary.json over the repeats.
inline int cmd_run(const std::string& config_path, const RunOptions& opts, std::ostream& out, std::ostream& err) {
  namespace fs = std::filesystem;
  std::string raw;
  ExperimentFile file;
  try {
    file = load_experiment(config_path, &raw);
  } catch (const Error& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  const std::uint64_t master = opts.seed.value_or(file.seed);
  const fs::path root = opts.out.value_or(file.output_dir);
  const std::uint64_t config_hash = fnv1a64(raw);

  std::vector<EvalReport> reports;
  std::vector<std::uint64_t> seeds;
  for (std::size_t rep = 0; rep < file.repeats; ++rep) {
    const std::uint64_t seed = master + rep;
    const fs::path dir = root / ("seed_" + std::to_string(seed));
    ExperimentConfig cfg;
    try {
      cfg = make_experiment_config(file, materialize_clients(file, seed), seed);
    } catch (const Error& e) {
      err << "config error: " << e.what() << '\n';
      return kExitConfig;
    }
    try {
      const ExperimentResult result = run_experiment(cfg);
      std::vector<ClientResult> rows;
      for (const auto& o : result.outcomes) rows.push_back(o.result);
      const EvalReport rep_report = build_report(rows, nullptr, file.custom_weights);
      std::ostringstream results, aggregate;
      write_results_csv(results, rep_report);
      write_aggregate_json(aggregate, rep_report);
      std::map<std::string, std::string> files{{"history.tsv", detail::history_text(result.history)},
                                               {"results.csv", results.str()},
                                               {"aggregate.json", aggregate.str()},
                                               {"communication.log", detail::log_text(result.history.comm_log)}};
      if (cfg.strategy.kind == StrategyKind::FedMAML) {
        std::ostringstream un;
        un << "client,unadapted_value,adapted_value\n";
        for (const auto& o : result.outcomes) {
          un << o.result.client << ',' << format_real(o.unadapted.value_or(NAN)) << ',' << format_real(o.result.value)
             << '\n';
        }
        files.emplace("adaptation.csv", un.str());
      }
      detail::write_artifacts(dir, files, config_hash, seed, "ok");
      out << "seed " << seed << ": equal " << format_real(rep_report.equal) << ", data_weighted "
          << format_real(rep_report.data_weighted) << " -> " << dir.string() << '\n';
      reports.push_back(rep_report);
      seeds.push_back(seed);
    } catch (const ExperimentFailure& f) {
      detail::write_artifacts(dir,
                              {{"history.tsv", detail::history_text(f.history)},
                               {"communication.log", detail::log_text(f.history.comm_log)}},
                              config_hash, seed, f.kind == FailureKind::Protocol ? "protocol_violation" : "numeric_failure");
      err << (f.kind == FailureKind::Numeric ? "numeric failure: " : "") << f.what() << '\n';
      return f.kind == FailureKind::Protocol ? kExitProtocol : kExitNumeric;
    } catch (const ConfigError& e) {
      err << "config error: " << e.what() << '\n';
      return kExitConfig;
    } catch (const NumericError& e) {
      err << "numeric failure: " << e.what() << '\n';
      return kExitNumeric;
    }
  }

  std::ostringstream s;
  s << "{\n  \"repeats\": " << reports.size() << ",\n  \"seeds\": [";
  for (std::size_t i = 0; i < seeds.size(); ++i) s << (i ? ", " : "") << seeds[i];
  s << "],\n";
  auto field = [&](const char* name, const std::vector<double>& v) {
    const auto m = detail::moments(v);
    s << "  \"" << name << "\": {\"mean\": " << format_real(m.mean) << ", \"std\": " << format_real(m.std) << "},\n";
  };
  std::vector<double> eq, dw;
  for (const auto& r : reports) {
    eq.push_back(r.equal);
    dw.push_back(r.data_weighted);
  }
  field("equal", eq);
  field("data_weighted", dw);
  s << "  \"clients\": [";
  for (std::size_t c = 0; c < reports.front().clients.size(); ++c) {
    std::vector<double> v;
    for (const auto& r : reports) v.push_back(r.clients[c].value);
    const auto m = detail::moments(v);
    s << (c ? ",\n" : "\n") << "    {\"client\": " << reports.front().clients[c].client << ", \"metric\": \""
      << to_string(reports.front().clients[c].metric) << "\", \"mean\": " << format_real(m.mean)
      << ", \"std\": " << format_real(m.std) << "}";
  }
  s << "\n  ]\n}\n";
  detail::write_file(root / "summary.json", s.str());
  return kExitOk;
}

// Per-client results of a run directory: a seed directory holding results.csv
// directly, or a run root whose seed_* subdirectories are averaged per client.
inline std::vector<ClientResult> load_run_results(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (fs::exists(dir / "results.csv")) {
    std::istringstream is(detail::read_file(dir / "results.csv"));
    return read_results_csv(is);
  }
  if (!fs::is_directory(dir)) throw ConfigError("no such run directory: " + dir.string());
  std::vector<fs::path> seeds;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory() && e.path().filename().string().starts_with("seed_") && fs::exists(e.path() / "results.csv")) {
      seeds.push_back(e.path());
    }
  }
  if (seeds.empty()) throw ConfigError("no results.csv under " + dir.string());
  std::sort(seeds.begin(), seeds.end());
  std::vector<ClientResult> mean;
  for (const auto& p : seeds) {
    std::istringstream is(detail::read_file(p / "results.csv"));
    auto rows = read_results_csv(is);
    if (mean.empty()) {
      mean = rows;
      continue;
    }
    if (rows.size() != mean.size()) throw ConfigError("seed directories under " + dir.string() + " disagree on clients");
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].client != mean[i].client) throw ConfigError("seed directories disagree on clients");
      mean[i].value += rows[i].value;
    }
  }
  for (auto& r : mean) {
    r.value /= static_cast<double>(seeds.size());
    r.baseline.reset();
  }
  return mean;
}

inline int cmd_compare(const std::string& baseline_dir, const std::string& method_dir,
                       const std::optional<std::string>& out_dir, std::ostream& out, std::ostream& err) {
  namespace fs = std::filesystem;
  EvalReport rep;
  try {
    const auto base = load_run_results(baseline_dir);
    rep = build_report(load_run_results(method_dir), &base, std::nullopt, baseline_dir);
  } catch (const ParseError& e) {
    err << "parse error at line " << e.line << ": " << e.what() << '\n';
    return kExitConfig;
  } catch (const Error& e) {
    err << "compare failed: " << e.what() << '\n';
    return kExitConfig;
  }
  const fs::path dir = out_dir ? fs::path(*out_dir) : fs::path(method_dir) / "comparison";
  fs::create_directories(dir);
  std::ostringstream results, aggregate, bars;
  write_results_csv(results, rep);
  write_aggregate_json(aggregate, rep);
  bars << "client,improvement_pct\n";
  out << "client\tmetric\tvalue\tbaseline\timprovement%\n";
  for (std::size_t i = 0; i < rep.clients.size(); ++i) {
    const auto& c = rep.clients[i];
    bars << c.client << ',' << format_real(*rep.improvement[i]) << '\n';
    out << c.client << '\t' << to_string(c.metric) << std::fixed << std::setprecision(4) << '\t' << c.value << '\t'
        << *c.baseline << std::setprecision(2) << '\t' << *rep.improvement[i] << std::defaultfloat << '\n';
  }
  out << "Overall: " << std::fixed << std::setprecision(2) << *rep.overall_improvement << "%" << std::defaultfloat
      << '\n';
  detail::write_file(dir / "improvement.csv", results.str());
  detail::write_file(dir / "aggregate.json", aggregate.str());
  detail::write_file(dir / "bars.csv", bars.str());
  return kExitOk;
}

inline int cmd_protocol_audit(const std::string& log_path, std::ostream& out, std::ostream& err) {
  std::vector<LogEntry> log;
  try {
    std::istringstream is(detail::read_file(log_path));
    log = read_log(is);
  } catch (const ParseError& e) {
    err << log_path << ":" << e.line << ": " << e.what() << '\n';
    return kExitConfig;
  } catch (const Error& e) {
    err << e.what() << '\n';
    return kExitConfig;
  }
  out << "messages (" << log.size() << ")\n";
  for (const auto& e : log) {
    out << "  round " << e.round << "  sender " << e.sender << "  " << kind_name(e.kind) << "  declared " << e.declared
        << "  bytes " << e.bytes << "  " << to_string(e.verdict) << '\n';
  }
  const auto summary = communication_summary(log);
  out << "bytes per round and kind\n";
  for (const auto& [round, kinds] : summary.bytes) {
    out << "  round " << round << ':';
    for (const auto& [kind, bytes] : kinds) {
      out << "  " << kind << ' ' << bytes << " (" << summary.messages.at(round).at(kind) << " msgs)";
    }
    out << '\n';
  }
  if (summary.anomalies.empty()) {
    out << "violations: none\n";
    return kExitOk;
  }
  out << "violations (" << summary.anomalies.size() << ")\n";
  for (const auto& e : summary.anomalies) {
    out << "  round " << e.round << "  sender " << e.sender << "  " << kind_name(e.kind) << "  "
        << to_string(e.verdict) << '\n';
  }
  return kExitProtocol;
}

}  // namespace hetfl
