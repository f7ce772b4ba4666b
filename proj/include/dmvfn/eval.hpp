#pragma once

// Dataset-level evaluation: multi-horizon metrics, the copy-last baseline,
// per-block usage rates and FLOPs reports.

#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "dmvfn/data.hpp"
#include "dmvfn/flops.hpp"
#include "dmvfn/metrics.hpp"
#include "dmvfn/model.hpp"

namespace dmvfn {

/// Running means keyed by (subset, horizon, metric). MS-SSIM is stored in
/// units of 1e-2 (i.e. x100), PSNR in dB.
class MetricReport {
 public:
  void add(const std::string& subset, int horizon, const std::string& metric, double value) {
    auto& [sum, n] = cells_[{subset, horizon, metric}];
    sum += value;
    ++n;
  }

  double mean(const std::string& subset, int horizon, const std::string& metric) const {
    auto it = cells_.find({subset, horizon, metric});
    if (it == cells_.end() || it->second.second == 0)
      throw std::out_of_range("no samples for " + subset + "/" + std::to_string(horizon) + "/" + metric);
    return it->second.first / static_cast<double>(it->second.second);
  }

  std::int64_t count(const std::string& subset, int horizon, const std::string& metric) const {
    auto it = cells_.find({subset, horizon, metric});
    return it == cells_.end() ? 0 : it->second.second;
  }

  /// Adds all cells of `other`, with `prefix` prepended to metric names.
  void merge(const MetricReport& other, const std::string& prefix = "") {
    for (const auto& [key, cell] : other.cells_) {
      auto& dst = cells_[{std::get<0>(key), std::get<1>(key), prefix + std::get<2>(key)}];
      dst.first += cell.first;
      dst.second += cell.second;
    }
  }

  void write_csv(std::ostream& os) const {
    os << "subset,horizon,metric,value,n\n";
    char buf[64];
    for (const auto& [key, cell] : cells_) {
      std::snprintf(buf, sizeof buf, "%.6f", cell.first / static_cast<double>(cell.second));
      os << std::get<0>(key) << "," << std::get<1>(key) << "," << std::get<2>(key) << "," << buf << ","
         << cell.second << "\n";
    }
  }

  void write_text(std::ostream& os) const {
    char buf[160];
    for (const auto& [key, cell] : cells_) {
      std::snprintf(buf, sizeof buf, "%-10s t+%-2d %-20s %10.4f  (n=%lld)\n", std::get<0>(key).c_str(),
                    std::get<1>(key), std::get<2>(key).c_str(), cell.first / static_cast<double>(cell.second),
                    static_cast<long long>(cell.second));
      os << buf;
    }
  }

 private:
  std::map<std::tuple<std::string, int, std::string>, std::pair<double, std::int64_t>> cells_;
};

namespace detail {

inline int max_horizon(const std::vector<int>& horizons) {
  if (horizons.empty()) throw ConfigError("no horizons given");
  int h = 0;
  for (int x : horizons) {
    if (x < 1) throw ConfigError("horizons must be >= 1");
    h = std::max(h, x);
  }
  return h;
}

inline void require_ground_truth(const ClipRecord& c, int hmax) {
  if (c.frames.size() < static_cast<std::size_t>(2 + hmax))
    throw DataError("clip '" + c.meta.source + "' has " + std::to_string(c.frames.size()) +
                    " frames; horizon t+" + std::to_string(hmax) + " needs " + std::to_string(2 + hmax) +
                    " (missing ground truth)");
}

inline std::vector<std::string> subsets_of(const ClipRecord& c) {
  std::vector<std::string> s{"all"};
  if (!c.meta.subset.empty() && c.meta.subset != "all") s.push_back(c.meta.subset);
  return s;
}

inline void score(MetricReport& rep, const ClipRecord& c, int h, const Frame& pred) {
  const auto& truth = c.frames[static_cast<std::size_t>(1 + h)];
  const double ms = 100.0 * ms_ssim(pred, truth), ps = psnr(pred, truth);
  for (const auto& s : subsets_of(c)) {
    rep.add(s, h, "ms_ssim", ms);
    rep.add(s, h, "psnr", ps);
  }
}

}  // namespace detail

/// Predicting frame t+j as a copy of frame t (inputs are frames 0 and 1).
inline MetricReport copy_last_baseline(const std::vector<ClipRecord>& clips, const std::vector<int>& horizons) {
  const int hmax = detail::max_horizon(horizons);
  if (clips.empty()) throw DataError("copy_last_baseline: empty dataset");
  MetricReport rep;
  for (const auto& c : clips) {
    detail::require_ground_truth(c, hmax);
    for (int h : horizons) detail::score(rep, c, h, c.frames[1]);
  }
  return rep;
}

/// Rolls the model out from frames (0, 1) and scores frames 1 + h.
inline MetricReport evaluate_model(const DmvfnModel<float>& model, const std::vector<ClipRecord>& clips,
                                   const std::vector<int>& horizons, const RoutingMode& mode, Rng& rng) {
  const int hmax = detail::max_horizon(horizons);
  if (clips.empty()) throw DataError("evaluate_model: empty dataset");
  MetricReport rep;
  for (const auto& c : clips) {
    detail::require_ground_truth(c, hmax);
    const auto preds = predict_sequence(model, c.frames[0], c.frames[1], hmax, mode, rng);
    for (int h : horizons) detail::score(rep, c, h, preds[static_cast<std::size_t>(h - 1)]);
  }
  return rep;
}

/// Mean routing decision per block, keyed by subset.
struct UsageStats {
  std::map<std::string, std::pair<std::vector<double>, std::int64_t>> cells;

  void add(const std::string& key, const std::vector<double>& v) {
    auto& [sum, n] = cells[key];
    if (sum.empty()) sum.assign(v.size(), 0.0);
    for (std::size_t i = 0; i < v.size(); ++i) sum[i] += v[i];
    ++n;
  }

  std::vector<double> rates(const std::string& key) const {
    const auto& [sum, n] = cells.at(key);
    std::vector<double> r(sum.size());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = sum[i] / static_cast<double>(n);
    return r;
  }

  /// CSV with usage rates in units of 1e-2.
  void write_csv(std::ostream& os) const {
    os << "subset,block,usage,n\n";
    char buf[64];
    for (const auto& [key, cell] : cells) {
      const auto r = rates(key);
      for (std::size_t i = 0; i < r.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.4f", 100.0 * r[i]);
        os << key << "," << i + 1 << "," << buf << "," << cell.second << "\n";
      }
    }
  }
};

enum class UsageKey { subset, motion, interval };

inline UsageKey usage_key_from_string(const std::string& s) {
  if (s == "subset") return UsageKey::subset;
  if (s == "motion") return UsageKey::motion;
  if (s == "interval") return UsageKey::interval;
  throw ConfigError("--by must be subset, motion or interval, got '" + s + "'");
}

/// Inference-phase routing over frame pairs. `by == interval` pairs frames
/// (0, k) for k in `intervals`; otherwise frames (0, 1). Each pair is routed
/// `repeats` times.
inline UsageStats usage_rate(const DmvfnModel<float>& model, const std::vector<ClipRecord>& clips,
                             const RoutingMode& mode, Rng& rng, UsageKey by = UsageKey::subset, int repeats = 1,
                             const std::vector<int>& intervals = {1, 3, 5}) {
  if (clips.empty()) throw DataError("usage_rate: empty dataset");
  NoGradGuard no_grad;
  UsageStats st;
  auto route = [&](const Frame& a, const Frame& b, const std::vector<std::string>& keys) {
    for (int r = 0; r < repeats; ++r) {
      const auto rv = make_routing(mode, model.routing_net(), a, b, Phase::infer, rng);
      std::vector<double> v(static_cast<std::size_t>(rv.size()));
      for (std::int64_t i = 0; i < rv.size(); ++i) v[i] = rv.selected(0, i) ? 1.0 : 0.0;
      for (const auto& k : keys) st.add(k, v);
    }
  };
  for (const auto& c : clips) {
    validate_clip(c, 2);
    switch (by) {
      case UsageKey::subset:
        route(c.frames[0], c.frames[1], detail::subsets_of(c));
        break;
      case UsageKey::motion: {
        std::vector<std::string> keys{"all"};
        keys.push_back(c.meta.motion_bin.empty() ? "unknown" : c.meta.motion_bin);
        route(c.frames[0], c.frames[1], keys);
        break;
      }
      case UsageKey::interval:
        for (int k : intervals)
          if (static_cast<std::size_t>(k) < c.frames.size())
            route(c.frames[0], c.frames[static_cast<std::size_t>(k)], {"interval_" + std::to_string(k)});
        break;
    }
  }
  if (st.cells.empty()) throw DataError("usage_rate: no clip has enough frames");
  return st;
}

template <class T>
FlopsLedger count_flops(const DmvfnModel<T>& model, std::int64_t H, std::int64_t W) {
  return count_flops(model.config(), H, W);
}

/// Static ledger plus dataset averages of the routed cost.
struct FlopsReport {
  FlopsLedger ledger;
  double expected_total = 0;  // routing + sum_i w_i * block_i, deterministic in beta
  double sampled_total = 0;   // routing + selected blocks under sampled routing
  std::vector<double> mean_probs;
  std::int64_t n = 0;
};

inline FlopsReport flops_report(const DmvfnModel<float>& model, const std::vector<ClipRecord>& clips,
                                const RoutingMode& mode, Rng& rng) {
  if (clips.empty()) throw DataError("flops_report: empty dataset");
  NoGradGuard no_grad;
  FlopsReport rep;
  rep.ledger = count_flops(model, clips[0].height(), clips[0].width());
  rep.mean_probs.assign(model.size(), 0.0);
  for (const auto& c : clips) {
    validate_clip(c, 2);
    if (c.height() != rep.ledger.height || c.width() != rep.ledger.width)
      throw DataError("flops_report: clips must share one frame size");
    const auto rv = make_routing(mode, model.routing_net(), c.frames[0], c.frames[1], Phase::infer, rng);
    std::vector<double> probs(model.size());
    std::vector<std::uint8_t> sel(model.size());
    for (std::size_t i = 0; i < model.size(); ++i) {
      probs[i] = static_cast<double>(rv.probs.vec()[i]);
      sel[i] = rv.selected(0, static_cast<std::int64_t>(i)) ? 1 : 0;
      rep.mean_probs[i] += probs[i];
    }
    rep.expected_total += rep.ledger.expected_total(probs);
    rep.sampled_total += rep.ledger.dynamic_total(sel);
    ++rep.n;
  }
  const auto n = static_cast<double>(rep.n);
  rep.expected_total /= n;
  rep.sampled_total /= n;
  for (auto& p : rep.mean_probs) p /= n;
  return rep;
}

}  // namespace dmvfn
