#pragma once

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mona/checkpoint.hpp"
#include "mona/config.hpp"
#include "mona/datakit.hpp"
#include "mona/metrics.hpp"
#include "mona/pipeline.hpp"
#include "mona/theory.hpp"

namespace mona::cli {

namespace fs = std::filesystem;

/// Shortest round-trip text for a double; "nan" / "inf" / "-inf" otherwise.
inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

/// Tab-separated file with a header row.
class TsvWriter {
 public:
  TsvWriter(const fs::path& path, std::vector<std::string> header) : out_(path), cols_(header.size()), path_(path) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
    row(header);
  }

  void row(const std::vector<std::string>& cells) {
    if (cells.size() != cols_) throw std::logic_error(path_.string() + ": row width does not match header");
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "\t" : "") << cells[i];
    out_ << '\n';
  }

 private:
  std::ofstream out_;
  std::size_t cols_;
  fs::path path_;
};

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const {
    auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : static_cast<int>(it - header.begin());
  }
};

inline Table read_tsv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("missing input " + path.string());
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, '\t')) cells.push_back(cell);
    if (!line.empty() && line.back() == '\t') cells.emplace_back();
    return cells;
  };
  Table t;
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path.string() + ": empty file");
  t.header = split(line);
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto cells = split(line);
    if (cells.size() != t.header.size()) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": expected " +
                               std::to_string(t.header.size()) + " columns, got " + std::to_string(cells.size()));
    }
    t.rows.push_back(std::move(cells));
  }
  return t;
}

inline std::optional<double> parse_number(const std::string& s) {
  if (s == "nan") return std::nan("");
  if (s == "inf") return INFINITY;
  if (s == "-inf") return -INFINITY;
  double v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

// ---------------------------------------------------------------------------
// SVG rendering

namespace svg {

inline std::string esc(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else if (c == '&') o += "&amp;";
    else o += c;
  }
  return o;
}

inline const char* color(std::size_t i) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  return palette[i % 10];
}

inline bool numeric_column(const Table& t, int c) {
  if (t.rows.empty()) return false;
  for (const auto& r : t.rows)
    if (!parse_number(r[c])) return false;
  return true;
}

/// One panel per numeric column against `step`; rows are grouped into
/// separate lines by an `instance` column when present.
inline std::string line_panels(const Table& t, const std::string& title) {
  const int xs = t.column("step");
  const int grp = t.column("instance");
  std::vector<int> ys;
  for (int c = 0; c < static_cast<int>(t.header.size()); ++c)
    if (c != xs && c != grp && numeric_column(t, c)) ys.push_back(c);
  const int pw = 560, ph = 150, top = 30, gap = 30, left = 70;
  const int height = top + static_cast<int>(ys.size()) * (ph + gap) + 10;
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << pw + left + 20 << "\" height=\"" << height
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << left << "\" y=\"18\" font-size=\"14\">" << esc(title) << "</text>\n";
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t r = 0; r < t.rows.size(); ++r) groups[grp >= 0 ? t.rows[r][grp] : ""].push_back(r);
  double x0 = INFINITY, x1 = -INFINITY;
  for (const auto& r : t.rows) {
    const double x = *parse_number(r[xs]);
    x0 = std::min(x0, x);
    x1 = std::max(x1, x);
  }
  if (!(x1 > x0)) x1 = x0 + 1;
  for (std::size_t p = 0; p < ys.size(); ++p) {
    const int c = ys[p];
    const int y_off = top + static_cast<int>(p) * (ph + gap);
    double lo = INFINITY, hi = -INFINITY;
    for (const auto& r : t.rows) {
      const double v = *parse_number(r[c]);
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
    if (!std::isfinite(lo)) lo = 0, hi = 1;
    if (!(hi > lo)) hi = lo + 1;
    o << "<rect x=\"" << left << "\" y=\"" << y_off << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"#444\"/>\n";
    o << "<text x=\"" << left + 4 << "\" y=\"" << y_off + 13 << "\">" << esc(t.header[c]) << "</text>\n";
    o << "<text x=\"" << left - 4 << "\" y=\"" << y_off + 10 << "\" text-anchor=\"end\">" << fmt(hi) << "</text>\n";
    o << "<text x=\"" << left - 4 << "\" y=\"" << y_off + ph << "\" text-anchor=\"end\">" << fmt(lo) << "</text>\n";
    std::size_t g = 0;
    for (const auto& [name, idx] : groups) {
      o << "<polyline fill=\"none\" stroke=\"" << color(g++) << "\" stroke-width=\"1\" points=\"";
      for (std::size_t r : idx) {
        const double v = *parse_number(t.rows[r][c]);
        if (!std::isfinite(v)) continue;
        const double x = left + pw * (*parse_number(t.rows[r][xs]) - x0) / (x1 - x0);
        const double y = y_off + ph - ph * (v - lo) / (hi - lo);
        o << fmt(std::round(x * 10) / 10) << ',' << fmt(std::round(y * 10) / 10) << ' ';
      }
      o << "\"/>\n";
    }
  }
  o << "</svg>\n";
  return o.str();
}

/// Horizontal-category bar chart of one numeric column.
inline std::string bars(const Table& t, int value_col, const std::string& title) {
  std::vector<std::string> labels;
  std::vector<double> values;
  std::set<std::string> firsts;
  bool dup = false;
  for (const auto& r : t.rows) dup = dup || !firsts.insert(r[0]).second;
  for (const auto& r : t.rows) {
    std::string label = r[0];
    if (dup && value_col > 1) label += "/" + r[1];
    labels.push_back(label);
    values.push_back(*parse_number(r[value_col]));
  }
  double hi = 0, lo = 0;
  for (double v : values)
    if (std::isfinite(v)) hi = std::max(hi, v), lo = std::min(lo, v);
  if (!(hi > lo)) hi = lo + 1;
  const int bw = 24, gap = 8, left = 70, top = 30, ph = 260;
  const int width = left + static_cast<int>(values.size()) * (bw + gap) + 20;
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << std::max(width, 300) << "\" height=\"" << top + ph + 80
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << left << "\" y=\"18\" font-size=\"14\">" << esc(title + ": " + t.header[value_col])
    << "</text>\n";
  const double zero_y = top + ph * hi / (hi - lo);
  o << "<line x1=\"" << left << "\" x2=\"" << width - 10 << "\" y1=\"" << fmt(zero_y) << "\" y2=\"" << fmt(zero_y)
    << "\" stroke=\"#444\"/>\n";
  o << "<text x=\"" << left - 4 << "\" y=\"" << top + 10 << "\" text-anchor=\"end\">" << fmt(hi) << "</text>\n";
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = std::isfinite(values[i]) ? values[i] : 0.0;
    const double h = ph * std::abs(v) / (hi - lo);
    const double y = v >= 0 ? zero_y - h : zero_y;
    const int x = left + static_cast<int>(i) * (bw + gap);
    o << "<rect x=\"" << x << "\" y=\"" << fmt(std::round(y * 10) / 10) << "\" width=\"" << bw << "\" height=\""
      << fmt(std::round(h * 10) / 10) << "\" fill=\"" << color(0) << "\"/>\n";
    o << "<text transform=\"translate(" << x + bw / 2 << "," << top + ph + 12 << ") rotate(60)\">" << esc(labels[i])
      << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

/// Picks a chart for a TSV: curves for step-indexed logs, bars otherwise.
inline std::string render(const Table& t, const std::string& title, const std::string& column = "") {
  if (t.rows.empty()) throw std::runtime_error(title + ": no rows to plot");
  if (column.empty() && t.column("step") >= 0) return line_panels(t, title);
  int c = -1;
  if (!column.empty()) {
    c = t.column(column);
    if (c < 0) throw std::runtime_error(title + ": no column named " + column);
  } else {
    for (const char* pref : {"dice", "share", "value"})
      if ((c = t.column(pref)) >= 0) break;
    if (c < 0)
      for (int k = static_cast<int>(t.header.size()) - 1; k > 0 && c < 0; --k)
        if (numeric_column(t, k)) c = k;
  }
  if (c <= 0 || !numeric_column(t, c)) throw std::runtime_error(title + ": no numeric column to plot");
  return bars(t, c, title);
}

}  // namespace svg

// ---------------------------------------------------------------------------
// Runs

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<long long> seed;
  std::string out;
  bool force = false;
};

/// Embedded defaults, then the config file, then --set overrides, then --seed.
inline TrainConfig resolve_config(const CommonOptions& o) {
  TrainConfig c;
  if (!o.config_path.empty()) c = load_config_file(o.config_path, c);
  for (const auto& kv : o.sets) apply_override(c, kv);
  if (o.seed) set_config_value(c, "run.seed", std::to_string(*o.seed));
  validate(c);
  return c;
}

inline fs::path output_root(const CommonOptions& o) {
  if (!o.out.empty()) return o.out;
  if (const char* env = std::getenv("MONA_LAB_OUT"); env && *env) return env;
  return "runs";
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

/// `<root>/<command>-<hash>-<timestamp>`, with a numeric suffix if taken.
inline fs::path make_run_dir(const fs::path& root, const std::string& command, std::uint64_t hash) {
  fs::create_directories(root);
  const std::string base = command + "-" + hex64(hash) + "-" + utc_timestamp();
  fs::path dir = root / base;
  for (int k = 2; fs::exists(dir); ++k) dir = root / (base + "-" + std::to_string(k));
  fs::create_directories(dir);
  return dir;
}

inline fs::path start_run(const CommonOptions& o, const std::string& command, const TrainConfig& c) {
  auto dir = make_run_dir(output_root(o), command, config_hash(c));
  std::ofstream(dir / "config.conf") << serialize(c);
  return dir;
}

inline const std::vector<Sample2D>& split_part(const DatasetSplit& s, const std::string& name) {
  if (name == "test") return s.test;
  if (name == "val") return s.val;
  if (name == "labeled") return s.labeled;
  throw ConfigError("config key 'run.eval_split': must be test, val or labeled (got " + name + ")");
}

/// Loads run.checkpoint and checks it was produced with the same data and
/// network settings. A mismatch is fatal unless `force` is set.
inline Checkpoint checked_checkpoint(const TrainConfig& c, bool force, std::ostream& err) {
  if (c.checkpoint.empty()) throw ConfigError("config key 'run.checkpoint': required by this command");
  auto ck = load_checkpoint(c.checkpoint);
  const auto want = model_hash(c);
  if (ck.config_hash != want) {
    err << "warning: checkpoint " << c.checkpoint << " was written for config hash " << hex64(ck.config_hash)
        << ", current data/net settings hash to " << hex64(want) << "\n";
    if (!force) throw std::runtime_error("checkpoint/config hash mismatch; pass --force to use it anyway");
  }
  return ck;
}

inline void write_split(const DatasetSplit& s, const fs::path& path) {
  TsvWriter w(path, {"patient", "slice", "role"});
  auto put = [&](const std::vector<Sample2D>& v, const char* role) {
    for (const auto& x : v) w.row({x.patient_id, std::to_string(x.slice_index), role});
  };
  put(s.labeled, "labeled");
  put(s.unlabeled, "unlabeled");
  put(s.val, "val");
  put(s.test, "test");
}

inline void write_eval(const EvalReport& r, const fs::path& dir) {
  TsvWriter e(dir / "eval.tsv", {"patient", "class", "dice", "asd"});
  for (const auto& v : r.volumes)
    for (std::size_t c = 0; c < v.dice.size(); ++c) e.row({v.patient_id, std::to_string(c + 1), fmt(v.dice[c]), fmt(v.asd[c])});
  TsvWriter s(dir / "summary.tsv", {"metric", "value"});
  s.row({"mean_dice", fmt(r.mean_dice)});
  s.row({"mean_asd", fmt(r.mean_asd)});
  s.row({"tail_dice", fmt(r.tail_dice)});
  for (std::size_t c = 0; c < r.class_dice.size(); ++c) s.row({"dice_class_" + std::to_string(c + 1), fmt(r.class_dice[c])});
  for (std::size_t c = 0; c < r.class_asd.size(); ++c) s.row({"asd_class_" + std::to_string(c + 1), fmt(r.class_asd[c])});
  s.row({"undefined_asd", std::to_string(r.undefined_asd)});
  s.row({"volumes", std::to_string(r.volumes.size())});
}

inline int cmd_synth(const CommonOptions& o, std::ostream& out) {
  const auto c = resolve_config(o);
  const auto dir = start_run(o, "synth", c);
  const auto data = generate_synthetic(c.data.synth);
  save_dataset(data, dir / "dataset");
  const auto freq = class_frequency(data);
  long long total = 0;
  for (const auto& [k, n] : freq) total += n;
  const auto target = zipf_shares(c.data.synth.foreground_classes, c.data.synth.exponent);
  long long fg_total = total - (freq.count(0) ? freq.at(0) : 0);
  TsvWriter w(dir / "class_frequency.tsv", {"class", "pixels", "share", "foreground_share", "zipf_share"});
  for (int k = 0; k < c.data.synth.num_classes(); ++k) {
    const long long n = freq.count(k) ? freq.at(k) : 0;
    w.row({std::to_string(k), std::to_string(n), fmt(static_cast<double>(n) / total),
           k == 0 ? "nan" : fmt(static_cast<double>(n) / fg_total), k == 0 ? "nan" : fmt(target[k - 1])});
  }
  TsvWriter s(dir / "summary.tsv", {"metric", "value"});
  s.row({"slices", std::to_string(data.size())});
  s.row({"patients", std::to_string(c.data.synth.num_patients)});
  s.row({"pixels", std::to_string(total)});
  out << dir.string() << "\n";
  return 0;
}

inline int cmd_pretrain(const CommonOptions& o, std::ostream& out) {
  const auto c = resolve_config(o);
  const auto dir = start_run(o, "pretrain", c);
  const auto split = prepare_split(c);
  write_split(split, dir / "split.tsv");
  auto st = initial_state(c);
  TsvWriter log(dir / "pretrain_log.tsv", {"step", "L_sup", "L_inst_global", "L_inst_local", "total", "lr"});
  PretrainLoss last;
  run_pretrain(c, split, st, [&](const PretrainLoss& l) {
    log.row({std::to_string(l.step), fmt(l.sup), fmt(l.inst_global), fmt(l.inst_local), fmt(l.total), fmt(l.lr)});
    last = l;
  });
  save_checkpoint(make_checkpoint(st.pair, "pretrain", model_hash(c), static_cast<std::uint64_t>(st.step)),
                  dir / "pretrain.ckpt");
  TsvWriter s(dir / "summary.tsv", {"metric", "value"});
  s.row({"steps", std::to_string(st.step)});
  s.row({"final_L_sup", fmt(last.sup)});
  s.row({"final_L_inst_global", fmt(last.inst_global)});
  s.row({"final_L_inst_local", fmt(last.inst_local)});
  out << dir.string() << "\n";
  return 0;
}

inline int cmd_finetune(const CommonOptions& o, std::ostream& out, std::ostream& err) {
  const auto c = resolve_config(o);
  TrainState<Real> st = initial_state(c);
  if (!c.finetune_from_scratch) {
    const auto ck = checked_checkpoint(c, o.force, err);
    if (ck.stage != "pretrain") err << "warning: checkpoint stage is '" << ck.stage << "', expected 'pretrain'\n";
    st = state_from_checkpoint(c, ck);
  }
  const auto dir = start_run(o, "finetune", c);
  const auto split = prepare_split(c);
  write_split(split, dir / "split.tsv");
  const int C = c.data.synth.num_classes();
  std::vector<std::string> header = {"step", "L_sup", "L_contrast", "L_eqv", "L_unsup", "L_nn", "total"};
  for (int k = 0; k < C; ++k) header.push_back("easy_" + std::to_string(k));
  for (int k = 0; k < C; ++k) header.push_back("hard_" + std::to_string(k));
  header.push_back("graph_mean");
  header.push_back("lr");
  TsvWriter log(dir / "finetune_log.tsv", header);
  auto bank = make_bank(c);
  run_finetune(c, split, st, bank, [&](const FinetuneLoss& l) {
    std::vector<std::string> row = {std::to_string(l.step), fmt(l.sup), fmt(l.contrast), fmt(l.eqv),
                                    fmt(l.unsup),           fmt(l.nn),  fmt(l.total)};
    for (int k = 0; k < C; ++k) row.push_back(std::to_string(k < static_cast<int>(l.easy_counts.size()) ? l.easy_counts[k] : 0));
    for (int k = 0; k < C; ++k) row.push_back(std::to_string(k < static_cast<int>(l.hard_counts.size()) ? l.hard_counts[k] : 0));
    row.push_back(fmt(l.graph_mean));
    row.push_back(fmt(l.lr));
    log.row(row);
  });
  save_checkpoint(make_checkpoint(st.pair, "finetune", model_hash(c), static_cast<std::uint64_t>(st.step)),
                  dir / "finetune.ckpt");
  write_eval(evaluate(st.pair.student, st.spec, split_part(split, c.eval_split)), dir);
  out << dir.string() << "\n";
  return 0;
}

inline int cmd_eval(const CommonOptions& o, std::ostream& out, std::ostream& err) {
  const auto c = resolve_config(o);
  const auto ck = checked_checkpoint(c, o.force, err);
  const auto st = state_from_checkpoint(c, ck);
  const auto split = prepare_split(c);
  const auto& part = split_part(split, c.eval_split);
  const auto dir = start_run(o, "eval", c);
  write_eval(evaluate(st.pair.student, st.spec, part), dir);
  out << dir.string() << "\n";
  return 0;
}

inline int cmd_theory(const CommonOptions& o, std::ostream& out) {
  const auto c = resolve_config(o);
  const auto dir = start_run(o, "theory", c);
  const auto& t = c.theory;
  TsvWriter w(dir / "theory.tsv", {"step", "instance", "eta", "train_mse", "participation", "alpha_participation",
                                   "top_share", "max_over_median", "coef_norm"});
  int pr_monotone = 0, top_monotone = 0, dom_monotone = 0;
  for (int i = 0; i < t.instances; ++i) {
    const auto p = theory::make_problem(t.n, c.seed * 1000003ULL + static_cast<std::uint64_t>(i), t.steps, t.width,
                                        t.eps_rel, t.noise);
    const auto h = theory::self_distill_simulate(p);
    const auto r = theory::sparsification_report(h);
    for (std::size_t s = 0; s < h.steps.size(); ++s) {
      double norm = 0;
      for (double v : h.steps[s].func_coef) norm += v * v;
      w.row({std::to_string(s + 1), std::to_string(i), fmt(h.steps[s].eta), fmt(h.steps[s].train_mse),
             fmt(r.participation[s]), fmt(r.alpha_participation[s]), fmt(r.top_share[s]), fmt(r.max_over_median[s]),
             fmt(std::sqrt(norm))});
    }
    pr_monotone += r.participation_nonincreasing;
    top_monotone += r.top_share_nondecreasing;
    dom_monotone += r.dominance_growing;
  }
  TsvWriter b(dir / "theory_bound.tsv", {"n", "C_scale", "bound"});
  for (int n : {25, 100, 400})
    for (double k : {1.0, 2.0}) {
      theory::BasisSpec s{{k * 1.0, k * 0.5, k * 0.25}, {1.0, 0.8, 0.5}, n};
      b.row({std::to_string(n), fmt(k), fmt(theory::rademacher_bound(s))});
    }
  TsvWriter s(dir / "summary.tsv", {"metric", "value"});
  s.row({"instances", std::to_string(t.instances)});
  s.row({"participation_nonincreasing", std::to_string(pr_monotone)});
  s.row({"top_share_nondecreasing", std::to_string(top_monotone)});
  s.row({"dominance_growing", std::to_string(dom_monotone)});
  out << dir.string() << "\n";
  return 0;
}

inline int cmd_plot(const CommonOptions& o, const std::vector<std::string>& inputs, const std::string& column,
                    std::ostream& out) {
  if (inputs.empty()) throw std::runtime_error("plot: no input files");
  std::string fingerprint;
  std::vector<Table> tables;
  for (const auto& in : inputs) {
    tables.push_back(read_tsv(in));
    std::ifstream f(in, std::ios::binary);
    fingerprint += in + "\n" + std::string(std::istreambuf_iterator<char>(f), {});
  }
  const auto dir = make_run_dir(output_root(o), "plot", fnv1a64(fingerprint + column));
  std::set<std::string> used;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const fs::path p(inputs[i]);
    std::string stem = p.stem().string();
    if (!used.insert(stem).second) stem += "_" + std::to_string(i);
    const auto title = p.filename().string();
    std::ofstream(dir / (stem + ".svg")) << svg::render(tables[i], title, column);
  }
  out << dir.string() << "\n";
  return 0;
}

inline void add_common(CLI::App* sub, CommonOptions& o) {
  sub->add_option("--config", o.config_path, "Config file (flat dotted keys)");
  sub->add_option("--set", o.sets, "Override one key, KEY=VALUE (repeatable)");
  sub->add_option("--seed", o.seed, "Run seed (run.seed)");
  sub->add_option("--out", o.out, "Output root (default $MONA_LAB_OUT or ./runs)");
  sub->add_flag("--force", o.force, "Accept a checkpoint whose config hash differs");
}

/// Entry point for the mona_lab tool. Returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Semi-supervised segmentation lab: synthetic data, two-stage training, evaluation, theory"};
  app.set_help_all_flag("--help-all", "Help for every command");
  bool show_defaults = false;
  app.add_flag("--show-defaults", show_defaults, "Print the embedded default config and exit");
  CommonOptions o;
  std::vector<std::string> inputs;
  std::string column;
  auto* synth = app.add_subcommand("synth", "Generate and save a synthetic dataset");
  auto* pretrain = app.add_subcommand("pretrain", "Stage one: instance discrimination pretraining");
  auto* finetune = app.add_subcommand("finetune", "Stage two: anatomical contrastive fine-tuning");
  auto* eval = app.add_subcommand("eval", "Evaluate run.checkpoint on run.eval_split");
  auto* theory_cmd = app.add_subcommand("theory", "Kernel self-distillation experiment");
  auto* plot = app.add_subcommand("plot", "Render TSV outputs to SVG");
  for (auto* s : {synth, pretrain, finetune, eval, theory_cmd}) add_common(s, o);
  plot->add_option("inputs", inputs, "TSV files")->required();
  plot->add_option("--column", column, "Column to draw as bars");
  plot->add_option("--out", o.out, "Output root (default $MONA_LAB_OUT or ./runs)");
  app.require_subcommand(0, 1);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }
  try {
    if (show_defaults) {
      out << serialize(TrainConfig{});
      return 0;
    }
    if (*synth) return cmd_synth(o, out);
    if (*pretrain) return cmd_pretrain(o, out);
    if (*finetune) return cmd_finetune(o, out, err);
    if (*eval) return cmd_eval(o, out, err);
    if (*theory_cmd) return cmd_theory(o, out);
    if (*plot) return cmd_plot(o, inputs, column, out);
    err << app.help();
    return 2;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace mona::cli
