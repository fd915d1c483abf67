#include "syncast/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "syncast/errors.hpp"

namespace syncast::metrics {

namespace {

torch::Tensor as_f32(const torch::Tensor& t) { return t.detach().to(torch::kCPU, torch::kFloat32).contiguous(); }

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (!a.sizes().equals(b.sizes())) {
    std::ostringstream ss;
    ss << what << ": shape mismatch " << a.sizes() << " vs " << b.sizes();
    throw ParameterError(ss.str());
  }
}

// Reflection index without repeating the edge sample: n, n+1, ... -> n-2, n-3, ...
int64_t reflect_index(int64_t i, int64_t n) {
  if (n == 1) return 0;
  const int64_t period = 2 * (n - 1);
  i %= period;
  return i < n ? i : period - i;
}

std::string threshold_key(double t) {
  std::ostringstream ss;
  ss.precision(6);
  ss << t;
  return ss.str();
}

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::optional<double> opt_from_json(const nlohmann::json& v) {
  if (v.is_null()) return std::nullopt;
  return v.get<double>();
}

}  // namespace

ThresholdSet::ThresholdSet(std::vector<double> thresholds) : values_(std::move(thresholds)) {
  if (values_.empty()) throw ParameterError("threshold set must not be empty");
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (!(values_[i] > 0.0 && values_[i] < 1.0)) throw ParameterError("thresholds must lie in (0, 1)");
    if (i > 0 && !(values_[i] > values_[i - 1])) throw ParameterError("thresholds must be strictly ascending");
  }
}

ThresholdSet ThresholdSet::sevir() {
  std::vector<double> v;
  for (double level : {16.0, 74.0, 133.0, 160.0, 181.0, 219.0}) v.push_back(level / 255.0);
  return ThresholdSet(std::move(v));
}

ThresholdSet ThresholdSet::synthetic() { return ThresholdSet({0.2, 0.4, 0.6}); }

torch::Tensor binarize(const torch::Tensor& field, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ParameterError("threshold must lie in (0, 1)");
  auto f = as_f32(field);
  auto out = torch::empty(f.sizes(), torch::kBool);
  const float* src = f.data_ptr<float>();
  bool* dst = out.data_ptr<bool>();
  for (int64_t i = 0; i < f.numel(); ++i) dst[i] = static_cast<double>(src[i]) >= threshold;
  return out;
}

ContingencyCounts contingency(const torch::Tensor& pred, const torch::Tensor& obs) {
  require_same_shape(pred, obs, "contingency");
  auto p = pred.to(torch::kBool).contiguous();
  auto o = obs.to(torch::kBool).contiguous();
  const bool* pp = p.data_ptr<bool>();
  const bool* op = o.data_ptr<bool>();
  ContingencyCounts c;
  for (int64_t i = 0; i < p.numel(); ++i) {
    if (pp[i]) {
      op[i] ? ++c.hits : ++c.false_alarms;
    } else {
      op[i] ? ++c.misses : ++c.correct_negatives;
    }
  }
  return c;
}

ContingencyCounts contingency(const torch::Tensor& pred, const torch::Tensor& obs, double threshold) {
  require_same_shape(pred, obs, "contingency");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ParameterError("threshold must lie in (0, 1)");
  auto p = as_f32(pred);
  auto o = as_f32(obs);
  const float* pp = p.data_ptr<float>();
  const float* op = o.data_ptr<float>();
  ContingencyCounts c;
  for (int64_t i = 0; i < p.numel(); ++i) {
    const bool yes_p = static_cast<double>(pp[i]) >= threshold;
    const bool yes_o = static_cast<double>(op[i]) >= threshold;
    if (yes_p) {
      yes_o ? ++c.hits : ++c.false_alarms;
    } else {
      yes_o ? ++c.misses : ++c.correct_negatives;
    }
  }
  return c;
}

std::optional<double> csi(const ContingencyCounts& c) {
  const int64_t denom = c.hits + c.misses + c.false_alarms;
  if (denom == 0) return std::nullopt;
  return static_cast<double>(c.hits) / static_cast<double>(denom);
}

std::optional<double> far(const ContingencyCounts& c) {
  const int64_t denom = c.hits + c.false_alarms;
  if (denom == 0) return std::nullopt;
  return static_cast<double>(c.false_alarms) / static_cast<double>(denom);
}

std::optional<double> hss(const ContingencyCounts& c) {
  const double h = static_cast<double>(c.hits);
  const double m = static_cast<double>(c.misses);
  const double f = static_cast<double>(c.false_alarms);
  const double cn = static_cast<double>(c.correct_negatives);
  const double denom = (h + m) * (m + cn) + (h + f) * (f + cn);
  if (denom == 0.0) return std::nullopt;
  return 2.0 * (h * cn - m * f) / denom;
}

std::optional<double> mean_defined(std::span<const std::optional<double>> values) {
  double sum = 0.0;
  int n = 0;
  for (const auto& v : values) {
    if (v) {
      sum += *v;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

torch::Tensor pool(const torch::Tensor& field, int64_t k) {
  if (k < 1) throw ParameterError("pool size must be positive");
  if (field.dim() < 2) throw ParameterError("pool expects a grid with at least two dims");
  if (k == 1) return field;
  auto f = field.detach().to(torch::kCPU, torch::kFloat64).contiguous();
  const int64_t h = f.size(-2);
  const int64_t w = f.size(-1);
  const int64_t oh = (h + k - 1) / k;
  const int64_t ow = (w + k - 1) / k;
  const int64_t planes = f.numel() / (h * w);
  auto out_sizes = f.sizes().vec();
  out_sizes[out_sizes.size() - 2] = oh;
  out_sizes[out_sizes.size() - 1] = ow;
  auto out = torch::empty(out_sizes, torch::kFloat64);
  const double* src = f.data_ptr<double>();
  double* dst = out.data_ptr<double>();
  const double inv = 1.0 / static_cast<double>(k * k);
  for (int64_t p = 0; p < planes; ++p) {
    const double* plane = src + p * h * w;
    for (int64_t by = 0; by < oh; ++by) {
      for (int64_t bx = 0; bx < ow; ++bx) {
        double sum = 0.0;
        for (int64_t dy = 0; dy < k; ++dy) {
          const int64_t y = reflect_index(by * k + dy, h);
          for (int64_t dx = 0; dx < k; ++dx) sum += plane[y * w + reflect_index(bx * k + dx, w)];
        }
        dst[(p * oh + by) * ow + bx] = sum * inv;
      }
    }
  }
  return out.to(field.scalar_type());
}

double crps(std::span<const torch::Tensor> ensemble, const torch::Tensor& obs, CrpsDivisor divisor) {
  if (ensemble.empty()) throw ParameterError("crps: ensemble must not be empty");
  for (const auto& m : ensemble) require_same_shape(m, obs, "crps");
  const auto m = static_cast<int64_t>(ensemble.size());
  std::vector<torch::Tensor> flat;
  flat.reserve(ensemble.size());
  for (const auto& member : ensemble) flat.push_back(member.detach().to(torch::kFloat64).reshape({-1}));
  auto x = torch::stack(flat);                                 // [m, N]
  auto y = obs.detach().to(torch::kFloat64).reshape({1, -1});  // [1, N]
  auto skill = (x - y).abs().mean(0);
  if (m == 1) return skill.mean().item<double>();
  auto spread = (x.unsqueeze(0) - x.unsqueeze(1)).abs().sum({0, 1});
  const double denom = divisor == CrpsDivisor::m_squared ? static_cast<double>(m * m) : static_cast<double>(m * (m - 1));
  return (skill - spread / (2.0 * denom)).mean().item<double>();
}

// --- aggregation --------------------------------------------------------------

ScoreAccumulator::ScoreAccumulator(ThresholdSet thresholds, std::vector<int64_t> pool_sizes)
    : thresholds_(std::move(thresholds)), pool_sizes_(std::move(pool_sizes)) {
  if (std::find(pool_sizes_.begin(), pool_sizes_.end(), 1) == pool_sizes_.end()) {
    pool_sizes_.insert(pool_sizes_.begin(), 1);
  }
  counts_.assign(pool_sizes_.size(), std::vector<ContingencyCounts>(thresholds_.size()));
}

void ScoreAccumulator::add(std::span<const torch::Tensor> members, const torch::Tensor& obs) {
  if (members.empty()) throw ParameterError("score_sequences: at least one prediction is required");
  for (const auto& m : members) require_same_shape(m, obs, "score_sequences");
  if (obs.dim() < 3) throw ParameterError("score_sequences: expected [T, H, W] or [T, 1, H, W] sequences");
  const auto& pred = members.front();
  const int64_t lead_times = obs.size(0);
  if (lead_counts_.size() < static_cast<std::size_t>(lead_times)) {
    lead_counts_.resize(static_cast<std::size_t>(lead_times), std::vector<ContingencyCounts>(thresholds_.size()));
  }
  for (std::size_t p = 0; p < pool_sizes_.size(); ++p) {
    const auto pp = pool(pred, pool_sizes_[p]);
    const auto po = pool(obs, pool_sizes_[p]);
    for (std::size_t t = 0; t < thresholds_.size(); ++t) {
      if (pool_sizes_[p] == 1) {
        for (int64_t lead = 0; lead < lead_times; ++lead) {
          const auto c = contingency(pp[lead], po[lead], thresholds_.values()[t]);
          lead_counts_[static_cast<std::size_t>(lead)][t] += c;
          counts_[p][t] += c;
        }
      } else {
        counts_[p][t] += contingency(pp, po, thresholds_.values()[t]);
      }
    }
  }
  crps_sum_ += crps(members, obs);
  ++crps_events_;
  ++n_events_;
}

ScoreReport ScoreAccumulator::report() const {
  ScoreReport r;
  r.thresholds = thresholds_.values();
  r.n_events = n_events_;
  for (std::size_t p = 0; p < pool_sizes_.size(); ++p) {
    std::vector<CategoricalScores> scores;
    std::vector<std::optional<double>> csis;
    for (const auto& c : counts_[p]) {
      scores.push_back({csi(c), far(c), hss(c)});
      csis.push_back(scores.back().csi);
    }
    r.csi_m_pooled[pool_sizes_[p]] = mean_defined(csis);
    r.pooled[pool_sizes_[p]] = std::move(scores);
  }
  std::vector<std::optional<double>> csis, fars, hsss;
  for (const auto& s : r.pooled.at(1)) {
    csis.push_back(s.csi);
    fars.push_back(s.far);
    hsss.push_back(s.hss);
  }
  r.csi_m = mean_defined(csis);
  r.far_m = mean_defined(fars);
  r.hss = mean_defined(hsss);
  if (crps_events_ > 0) r.crps = crps_sum_ / static_cast<double>(crps_events_);
  for (const auto& per_threshold : lead_counts_) {
    std::vector<std::optional<double>> lc, lf, lh;
    for (const auto& c : per_threshold) {
      lc.push_back(csi(c));
      lf.push_back(far(c));
      lh.push_back(hss(c));
    }
    r.per_lead_time.push_back({mean_defined(lc), mean_defined(lf), mean_defined(lh)});
  }
  return r;
}

ScoreReport score_sequences(std::span<const EventForecast> events, const ThresholdSet& thresholds,
                            std::vector<int64_t> pool_sizes) {
  ScoreAccumulator acc(thresholds, std::move(pool_sizes));
  for (const auto& e : events) acc.add(e.members, e.obs);
  return acc.report();
}

LeadTimeScores score_frame(const torch::Tensor& pred, const torch::Tensor& obs, const ThresholdSet& thresholds) {
  std::vector<std::optional<double>> c, f, h;
  for (double thr : thresholds.values()) {
    const auto counts = contingency(pred, obs, thr);
    c.push_back(csi(counts));
    f.push_back(far(counts));
    h.push_back(hss(counts));
  }
  return {mean_defined(c), mean_defined(f), mean_defined(h)};
}

// --- serialization ------------------------------------------------------------

nlohmann::json ScoreReport::to_json() const {
  using nlohmann::json;
  auto scores_doc = [&](const std::vector<CategoricalScores>& scores) {
    json doc = json::object();
    for (std::size_t i = 0; i < scores.size(); ++i) {
      doc[threshold_key(thresholds[i])] = {
          {"csi", opt_json(scores[i].csi)}, {"far", opt_json(scores[i].far)}, {"hss", opt_json(scores[i].hss)}};
    }
    return doc;
  };
  json pooled_doc = json::object();
  json pooled_csi_m = json::object();
  for (const auto& [k, scores] : pooled) {
    pooled_doc[std::to_string(k)] = scores_doc(scores);
    pooled_csi_m[std::to_string(k)] = opt_json(csi_m_pooled.count(k) ? csi_m_pooled.at(k) : std::nullopt);
  }
  json lead = json::array();
  for (const auto& l : per_lead_time) {
    lead.push_back({{"csi_m", opt_json(l.csi_m)}, {"far_m", opt_json(l.far_m)}, {"hss", opt_json(l.hss)}});
  }
  return json{{"thresholds", thresholds},
              {"per_threshold", pooled.count(1) ? scores_doc(pooled.at(1)) : json::object()},
              {"pooled", pooled_doc},
              {"csi_m_pooled", pooled_csi_m},
              {"csi_m", opt_json(csi_m)},
              {"far_m", opt_json(far_m)},
              {"hss", opt_json(hss)},
              {"crps", opt_json(crps)},
              {"per_lead_time", lead},
              {"n_events", n_events}};
}

ScoreReport ScoreReport::from_json(const nlohmann::json& doc) {
  ScoreReport r;
  try {
    r.thresholds = doc.at("thresholds").get<std::vector<double>>();
    for (const auto& [k, scores] : doc.at("pooled").items()) {
      std::vector<CategoricalScores> v;
      for (double t : r.thresholds) {
        const auto& s = scores.at(threshold_key(t));
        v.push_back({opt_from_json(s.at("csi")), opt_from_json(s.at("far")), opt_from_json(s.at("hss"))});
      }
      r.pooled[std::stoll(k)] = std::move(v);
    }
    if (doc.contains("csi_m_pooled")) {
      for (const auto& [k, v] : doc.at("csi_m_pooled").items()) r.csi_m_pooled[std::stoll(k)] = opt_from_json(v);
    }
    r.csi_m = opt_from_json(doc.at("csi_m"));
    r.far_m = opt_from_json(doc.at("far_m"));
    r.hss = opt_from_json(doc.at("hss"));
    r.crps = opt_from_json(doc.at("crps"));
    for (const auto& l : doc.at("per_lead_time")) {
      r.per_lead_time.push_back({opt_from_json(l.at("csi_m")), opt_from_json(l.at("far_m")),
                                 opt_from_json(l.value("hss", nlohmann::json(nullptr)))});
    }
    r.n_events = doc.value("n_events", int64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("score report: ") + e.what());
  }
  return r;
}

}  // namespace syncast::metrics
