#include "loopstage/synthesis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "loopstage/error.hpp"
#include "loopstage/log.hpp"

namespace loopstage {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::shared_ptr<const PairCompatibility> find_pair(const CompatibilityModel::Snapshot* snapshot,
                                                   const std::string& x, const std::string& y) {
  if (snapshot == nullptr) return nullptr;
  auto it = snapshot->find(pair_key(x, y));
  return it == snapshot->end() ? nullptr : it->second;
}

// chi with actor `x` at frame fx against actor `y` at fy; 1 without a model.
double pair_chi(const PairCompatibility* pair, const std::string& x, int fx, int fy) {
  if (pair == nullptr) return 1.0;
  return pair->actor_a() == x ? pair->chi(fx, fy) : pair->chi(fy, fx);
}

// Unary costs of every label at every column, row-major by column.
std::vector<double> unary_table(const RowInput& in) {
  const int columns = static_cast<int>(in.requests.size());
  const int labels = in.transitions->labels;
  std::vector<const PairCompatibility*> pairs;
  std::vector<std::shared_ptr<const PairCompatibility>> keep;
  for (const FixedRow& row : in.fixed_rows) {
    keep.push_back(find_pair(in.compatibility, in.actor_id, row.actor_id));
    pairs.push_back(keep.back().get());
  }
  std::vector<double> unary(static_cast<std::size_t>(columns) * labels);
  for (int k = 0; k < columns; ++k) {
    const double alpha = in.weights[k].alpha;
    const double beta = in.weights[k].beta;
    for (int t = 0; t < labels; ++t) {
      const double ea = action_cost(in.field->row(t), in.requests[k], in.sigma_a);
      double ec = 0.0;
      const int frame = t * in.frame_stride;
      for (std::size_t j = 0; j < in.fixed_rows.size(); ++j) {
        ec += pair_chi(pairs[j], in.actor_id, frame, in.fixed_rows[j].frames[k]);
      }
      ec *= in.compatibility_scale;
      const std::size_t i = static_cast<std::size_t>(k) * labels + t;
      unary[i] = alpha * ea + (1 - alpha) * beta * ec;
      if (!in.extra_unary.empty()) unary[i] += in.extra_unary[i];
    }
  }
  return unary;
}

double pairwise_weight(const ColumnWeights& w) { return (1 - w.alpha) * (1 - w.beta); }

void check_row_input(const RowInput& in) {
  if (in.field == nullptr || in.transitions == nullptr) {
    throw InvalidRequest("row input lacks field or transitions");
  }
  if (in.weights.size() != in.requests.size()) {
    throw InvalidRequest("row input: one weight per column required");
  }
  if (in.field->frames() < in.transitions->labels) {
    throw InvalidRequest("row input: action field smaller than label set");
  }
  for (const FixedRow& row : in.fixed_rows) {
    if (row.frames.size() < in.requests.size()) {
      throw InvalidRequest("row input: fixed row shorter than the block");
    }
  }
  if (!in.extra_unary.empty() &&
      in.extra_unary.size() != in.requests.size() * static_cast<std::size_t>(in.transitions->labels)) {
    throw InvalidRequest("row input: extra unary table has the wrong size");
  }
  if (in.anchor && (*in.anchor < 0 || *in.anchor >= in.transitions->labels)) {
    throw InvalidRequest("row input: anchor out of range");
  }
}

}  // namespace

void SynthesisParams::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidRequest("alpha must lie in [0, 1]");
  if (!(beta >= 0.0 && beta <= 1.0)) throw InvalidRequest("beta must lie in [0, 1]");
  if (!(sigma_a > 0.0)) throw InvalidRequest("sigma_a must be positive");
  if (sigma_t && !(*sigma_t > 0.0)) throw InvalidRequest("sigma_t must be positive");
  if (compression < 1) throw InvalidRequest("compression must be at least 1");
  if (ramp_len < 1) throw InvalidRequest("ramp_len must be at least 1");
  if (iterations < 1) throw InvalidRequest("iterations must be at least 1");
}

double action_cost(std::span<const double> action, std::span<const double> request,
                   double sigma_a) {
  double sum = 0.0;
  for (std::size_t i = 0; i < action.size(); ++i) {
    const double d = action[i] - request[i];
    sum += d * d;
  }
  return sum / (2.0 * sigma_a * sigma_a);
}

double transition_cost(const DistanceMatrix& matrix, int prev, int next, double sigma_t,
                       bool literal) {
  const int origin = transition_origin(prev, matrix.size(), literal);
  const double exponent = static_cast<double>(matrix.at(origin, next)) / (sigma_t * sigma_t);
  return std::exp(std::min(exponent, kMaxTransitionExponent));
}

double default_transition_sigma(const DistanceMatrix& matrix, const JumpGraph* graph) {
  double median = 0.0;
  if (graph != nullptr) median = graph->median_distance();
  if (median <= 0.0) {
    std::vector<float> values;
    const int n = matrix.size();
    for (int a = 0; a < n; ++a) {
      for (int b = a + 1; b < n; ++b) {
        if (matrix.at(a, b) > 0.0f) values.push_back(matrix.at(a, b));
      }
    }
    if (!values.empty()) {
      const std::size_t mid = values.size() / 2;
      std::nth_element(values.begin(), values.begin() + mid, values.end());
      median = values[mid];
    }
  }
  return median > 0.0 ? std::sqrt(median) : 1.0;
}

double smooth_step(double u) {
  u = std::clamp(u, 0.0, 1.0);
  return u * u * (3.0 - 2.0 * u);
}

std::vector<std::vector<double>> ramp_requests(std::span<const double> current, int target,
                                               int ramp_len) {
  std::vector<std::vector<double>> out;
  for (int i = 0; i <= ramp_len; ++i) {
    const double w = smooth_step(static_cast<double>(i) / ramp_len);
    std::vector<double> r(current.size());
    for (std::size_t a = 0; a < r.size(); ++a) {
      const double goal = static_cast<int>(a) == target ? 1.0 : 0.0;
      r[a] = (1.0 - w) * current[a] + w * goal;
    }
    out.push_back(std::move(r));
  }
  return out;
}

RequestTimeline::RequestTimeline(int action_count, int initial_action)
    : action_count_(action_count) {
  if (initial_action < 0 || initial_action >= action_count) {
    throw InvalidRequest("initial action out of range");
  }
  std::vector<double> one_hot(action_count, 0.0);
  one_hot[initial_action] = 1.0;
  ramps_.push_back({0, one_hot, initial_action, 1});
}

void RequestTimeline::trigger(int column, int target, int ramp_len) {
  if (target < 0 || target >= action_count_) throw InvalidRequest("action out of range");
  if (ramp_len < 1) throw InvalidRequest("ramp_len must be at least 1");
  std::vector<double> from = at(column);
  while (ramps_.size() > 1 && ramps_.back().start >= column) ramps_.pop_back();
  if (ramps_.size() == 1 && ramps_.front().start >= column && column <= 0) {
    ramps_.front() = {0, from, target, ramp_len};
    return;
  }
  ramps_.push_back({column, std::move(from), target, ramp_len});
}

std::vector<double> RequestTimeline::at(int column) const {
  const Ramp* active = &ramps_.front();
  for (const Ramp& r : ramps_) {
    if (r.start <= column) active = &r;
  }
  const double w = smooth_step(static_cast<double>(column - active->start) / active->length);
  std::vector<double> out(action_count_);
  for (int a = 0; a < action_count_; ++a) {
    const double goal = a == active->target ? 1.0 : 0.0;
    out[a] = (1.0 - w) * active->from[a] + w * goal;
  }
  return out;
}

int RequestTimeline::target_at(int column) const {
  int target = ramps_.front().target;
  for (const Ramp& r : ramps_) {
    if (r.start <= column) target = r.target;
  }
  return target;
}

double TransitionTable::cost(int from, int to) const {
  for (int e = edge_start[from]; e < edge_start[from + 1]; ++e) {
    if (edge_target[e] == to) return edge_cost[e];
  }
  return kInf;
}

TransitionTable build_transition_table(const DistanceMatrix& matrix, const JumpGraph* graph,
                                       double sigma_t, bool literal, bool hold_last) {
  TransitionTable table;
  const int n = matrix.size();
  table.labels = n;
  table.dense = graph == nullptr;
  table.edge_start.push_back(0);
  std::vector<int> targets;
  for (int t = 0; t < n; ++t) {
    targets.clear();
    if (graph == nullptr) {
      for (int s = 0; s < n; ++s) targets.push_back(s);
    } else {
      if (t + 1 < n || hold_last) targets.push_back(std::min(t + 1, n - 1));
      const int origin = transition_origin(t, n, literal);
      for (const JumpCandidate& c : graph->candidates[origin]) targets.push_back(c.frame);
      std::sort(targets.begin(), targets.end());
      targets.erase(std::unique(targets.begin(), targets.end()), targets.end());
    }
    for (int s : targets) {
      table.edge_target.push_back(s);
      table.edge_cost.push_back(transition_cost(matrix, t, s, sigma_t, literal));
    }
    table.edge_start.push_back(static_cast<int>(table.edge_target.size()));
  }
  return table;
}

double compatibility_cost(const CompatibilityModel::Snapshot* snapshot,
                          const std::string& actor_id, int frame,
                          std::span<const FixedRow> fixed_rows, int column) {
  double sum = 0.0;
  for (const FixedRow& row : fixed_rows) {
    auto pair = find_pair(snapshot, actor_id, row.actor_id);
    sum += pair_chi(pair.get(), actor_id, frame, row.frames[column]);
  }
  return sum;
}

RowResult synthesize_row(const RowInput& in) {
  check_row_input(in);
  const int columns = static_cast<int>(in.requests.size());
  const int n = in.transitions->labels;
  const TransitionTable& table = *in.transitions;
  RowResult result;
  if (columns == 0) return result;

  const std::vector<double> unary = unary_table(in);
  std::vector<double> cost(n, kInf);
  std::vector<double> next(n, kInf);
  std::vector<int> back(static_cast<std::size_t>(columns) * n, -1);

  auto relax = [&](int from, double base, double weight, std::vector<double>& into, int k) {
    for (int e = table.edge_start[from]; e < table.edge_start[from + 1]; ++e) {
      const int to = table.edge_target[e];
      const double cand = weight == 0.0 ? base : base + weight * table.edge_cost[e];
      if (cand < into[to]) {
        into[to] = cand;
        back[static_cast<std::size_t>(k) * n + to] = from;
      }
    }
  };
  auto fallback = [&](const std::vector<double>& prev, double weight, std::vector<double>& into,
                      int k) {
    int best = 0;
    for (int t = 1; t < n; ++t) {
      if (prev[t] < prev[best]) best = t;
    }
    const double penalty = std::exp(kMaxTransitionExponent);
    for (int t = 0; t < n; ++t) {
      into[t] = weight == 0.0 ? prev[best] : prev[best] + weight * penalty;
      back[static_cast<std::size_t>(k) * n + t] = best;
    }
    ++result.fallback_columns;
  };

  const double w0 = pairwise_weight(in.weights[0]);
  if (in.anchor) {
    relax(*in.anchor, 0.0, w0, cost, 0);
    if (std::none_of(cost.begin(), cost.end(), [](double c) { return c < kInf; })) {
      std::vector<double> seed(n, kInf);
      seed[*in.anchor] = 0.0;
      fallback(seed, w0, cost, 0);
    }
  } else {
    std::fill(cost.begin(), cost.end(), 0.0);
  }
  for (int t = 0; t < n; ++t) {
    if (cost[t] < kInf) cost[t] += unary[t];
  }

  for (int k = 1; k < columns; ++k) {
    std::fill(next.begin(), next.end(), kInf);
    const double w = pairwise_weight(in.weights[k]);
    for (int from = 0; from < n; ++from) {
      if (cost[from] < kInf) relax(from, cost[from], w, next, k);
    }
    if (std::none_of(next.begin(), next.end(), [](double c) { return c < kInf; })) {
      fallback(cost, w, next, k);
    }
    const double* u = &unary[static_cast<std::size_t>(k) * n];
    for (int t = 0; t < n; ++t) {
      if (next[t] < kInf) next[t] += u[t];
    }
    cost.swap(next);
  }
  if (result.fallback_columns > 0) {
    log_warning("synthesis: reachable set empty in " + std::to_string(result.fallback_columns) +
                " column(s), used the full label set");
  }

  int best = 0;
  for (int t = 1; t < n; ++t) {
    if (cost[t] < cost[best]) best = t;
  }
  result.objective = cost[best];
  result.labels.assign(columns, 0);
  for (int k = columns - 1; k >= 0; --k) {
    result.labels[k] = best;
    if (k > 0) best = back[static_cast<std::size_t>(k) * n + best];
  }
  return result;
}

double row_objective(const RowInput& in, std::span<const int> labels) {
  check_row_input(in);
  const int n = in.transitions->labels;
  const std::vector<double> unary = unary_table(in);
  double total = 0.0;
  for (std::size_t k = 0; k < labels.size(); ++k) {
    const double w = pairwise_weight(in.weights[k]);
    const bool has_prev = k > 0 || in.anchor.has_value();
    if (has_prev && w != 0.0) {
      const int prev = k > 0 ? labels[k - 1] : *in.anchor;
      total = total + w * in.transitions->cost(prev, labels[k]);
    }
    total = total + unary[k * n + labels[k]];
  }
  return total;
}

void OutputTimeline::write_csv(const std::filesystem::path& path,
                               const std::string& manifest_hash) const {
  std::ofstream out(path);
  if (!out) throw AssetError("cannot write " + path.string());
  out << "# manifest_hash=" << manifest_hash << "\n";
  out << "column,layer,frame_index\n";
  for (int k = 0; k < columns(); ++k) {
    for (const OutputLayer& layer : layers) {
      out << k << ',' << layer.layer_id << ',' << layer.frames[k] << "\n";
    }
  }
  if (!out) throw AssetError("failed writing " + path.string());
}

OutputTimeline OutputTimeline::read_csv(const std::filesystem::path& path,
                                        std::string* manifest_hash) {
  std::ifstream in(path);
  if (!in) throw AssetError("cannot read " + path.string());
  OutputTimeline timeline;
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("# manifest_hash=", 0) == 0) {
      if (manifest_hash != nullptr) *manifest_hash = line.substr(16);
      continue;
    }
    if (!header_seen) {
      if (line != "column,layer,frame_index") throw AssetError("bad timeline header in " + path.string());
      header_seen = true;
      continue;
    }
    std::stringstream ss(line);
    std::string column, layer, frame;
    if (!std::getline(ss, column, ',') || !std::getline(ss, layer, ',') ||
        !std::getline(ss, frame)) {
      throw AssetError("bad timeline row: " + line);
    }
    auto it = std::find_if(timeline.layers.begin(), timeline.layers.end(),
                           [&](const OutputLayer& l) { return l.layer_id == layer; });
    if (it == timeline.layers.end()) {
      timeline.layers.push_back({layer, {}, {}});
      it = timeline.layers.end() - 1;
    }
    const int k = std::stoi(column);
    if (k != static_cast<int>(it->frames.size())) throw AssetError("timeline columns out of order");
    it->frames.push_back(std::stoi(frame));
  }
  for (const OutputLayer& l : timeline.layers) {
    if (l.frames.size() != timeline.layers.front().frames.size()) {
      throw AssetError("timeline layers differ in length");
    }
  }
  return timeline;
}

bool operator==(const OutputTimeline& a, const OutputTimeline& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    if (a.layers[i].layer_id != b.layers[i].layer_id ||
        a.layers[i].frames != b.layers[i].frames) {
      return false;
    }
  }
  return true;
}

const SynthesisParams& ParamSchedule::at(int column) const {
  auto it = entries_.upper_bound(column);
  return std::prev(it)->second;
}

void ParamSchedule::set_from(int column, const SynthesisParams& params) {
  params.validate();
  entries_[std::max(column, 0)] = params;
}

void ParamSchedule::truncate_after(int column) {
  entries_.erase(entries_.upper_bound(std::max(column, 0)), entries_.end());
}

SynthesisEngine::SynthesisEngine(std::vector<LayerModel> layers,
                                 CompatibilityModel::Snapshot compatibility,
                                 SynthesisParams params)
    : layers_(std::move(layers)), compatibility_(std::move(compatibility)), schedule_(params) {
  params.validate();
  if (layers_.empty()) throw InvalidRequest("synthesis needs at least one layer");
  for (const LayerModel& l : layers_) {
    if (!l.matrix || !l.field) throw InvalidRequest("layer " + l.layer_id + " is incomplete");
    if (!params.dense && !l.graph) throw InvalidRequest("layer " + l.layer_id + " lacks a jump graph");
    if (l.field->frames() != l.matrix->size()) {
      throw InvalidRequest("layer " + l.layer_id + ": field and matrix sizes differ");
    }
    if (l.initial_frame < 0 || l.initial_frame >= l.matrix->size()) {
      throw InvalidRequest("layer " + l.layer_id + ": initial frame out of range");
    }
    requests_.emplace_back(l.field->actions(), l.default_action);
    timeline_.layers.push_back({l.layer_id, l.actor_id, {}});
  }
}

int SynthesisEngine::layer_index(std::string_view layer_id) const {
  for (int d = 0; d < layer_count(); ++d) {
    if (layers_[d].layer_id == layer_id) return d;
  }
  return -1;
}

void SynthesisEngine::set_compatibility(CompatibilityModel::Snapshot snapshot) {
  compatibility_ = std::move(snapshot);
}

const SynthesisEngine::Prepared& SynthesisEngine::prepared(int d, int stride) {
  auto key = std::make_pair(d, stride);
  auto it = prepared_.find(key);
  if (it != prepared_.end()) return it->second;

  const LayerModel& l = layers_.at(d);
  const SynthesisParams& p = schedule_.at(0);
  Prepared prep;
  prep.stride = stride;
  prep.sigma_t = p.sigma_t ? *p.sigma_t
                           : default_transition_sigma(*l.matrix, p.dense ? nullptr : l.graph.get());
  if (stride == 1) {
    prep.labels = l.matrix->size();
    prep.field = l.field;
    prep.transitions = build_transition_table(*l.matrix, p.dense ? nullptr : l.graph.get(),
                                              prep.sigma_t, p.literal_transition);
  } else {
    const int limit = std::max(1, l.matrix->size() - (stride - 1));
    DistanceMatrix sub = l.matrix->subsampled(stride, limit);
    prep.labels = sub.size();
    prep.field = std::make_shared<ActionVectorField>(l.field->subsampled(stride, limit));
    if (p.dense) {
      prep.transitions = build_transition_table(sub, nullptr, prep.sigma_t, p.literal_transition);
    } else {
      const JumpGraph graph = build_jump_graph(sub, l.graph->requested_candidates);
      prep.transitions = build_transition_table(sub, &graph, prep.sigma_t, p.literal_transition, false);
    }
  }
  return prepared_.emplace(key, std::move(prep)).first->second;
}

int SynthesisEngine::anchor_frame(int d, int column) const {
  if (column <= 0) return layers_[d].initial_frame;
  return timeline_.layers[d].frames.at(column - 1);
}

RowInput SynthesisEngine::row_input(int d, int first_column, int count, int stride,
                                    const std::vector<std::vector<int>>& fixed,
                                    std::span<const int> use_rows) {
  const Prepared& prep = prepared(d, stride);
  const LayerModel& l = layers_[d];
  RowInput in;
  in.actor_id = l.actor_id;
  in.field = prep.field.get();
  in.transitions = &prep.transitions;
  in.sigma_a = schedule_.at(first_column).sigma_a;
  in.compatibility = &compatibility_;
  in.frame_stride = stride;
  for (int k = 0; k < count; k += stride) {
    const int column = first_column + k;
    const SynthesisParams& p = schedule_.at(column);
    in.requests.push_back(requests_[d].at(column));
    in.weights.push_back({p.alpha, p.beta});
  }
  const int anchor = anchor_frame(d, first_column);
  in.anchor = std::min(anchor / stride, prep.labels - 1);
  for (int j : use_rows) {
    if (j == d) continue;
    std::vector<int> frames;
    for (int k = 0; k < count; k += stride) frames.push_back(fixed[j].at(k));
    in.owned_frames.push_back(std::move(frames));
  }
  std::size_t slot = 0;
  for (int j : use_rows) {
    if (j == d) continue;
    in.fixed_rows.push_back({layers_[j].actor_id, in.owned_frames[slot++]});
  }
  if (stride > 1) add_fill_costs(in, d, first_column, count, stride, fixed, use_rows);
  return in;
}

// Label a at a compressed column also shows frames a*stride + i on the
// stride - 1 skipped columns after it; charge their action and
// compatibility costs to the anchor so the DP sees the whole span.
void SynthesisEngine::add_fill_costs(RowInput& in, int d, int first_column, int count, int stride,
                                     const std::vector<std::vector<int>>& fixed,
                                     std::span<const int> use_rows) const {
  const LayerModel& l = layers_[d];
  const int n = l.matrix->size();
  const int labels = in.transitions->labels;
  std::vector<std::shared_ptr<const PairCompatibility>> pairs;
  std::vector<const std::vector<int>*> rows;
  for (int j : use_rows) {
    if (j == d) continue;
    pairs.push_back(find_pair(&compatibility_, l.actor_id, layers_[j].actor_id));
    rows.push_back(&fixed[j]);
  }
  in.extra_unary.assign(in.requests.size() * static_cast<std::size_t>(labels), 0.0);
  for (std::size_t c = 0; c < in.requests.size(); ++c) {
    const int k0 = static_cast<int>(c) * stride;
    for (int i = 1; i < stride && k0 + i < count; ++i) {
      const int column = first_column + k0 + i;
      const SynthesisParams& p = schedule_.at(column);
      const std::vector<double> request = requests_[d].at(column);
      for (int a = 0; a < labels; ++a) {
        const int frame = std::min(a * stride + i, n - 1);
        const double ea = action_cost(l.field->row(frame), request, in.sigma_a);
        double ec = 0.0;
        for (std::size_t j = 0; j < rows.size(); ++j) {
          ec += pair_chi(pairs[j].get(), l.actor_id, frame, rows[j]->at(k0 + i));
        }
        in.extra_unary[c * labels + a] += p.alpha * ea + (1 - p.alpha) * p.beta * ec;
      }
    }
  }
}

std::vector<int> SynthesisEngine::solve_layer(int d, int first_column, int count,
                                              const std::vector<std::vector<int>>& block,
                                              std::span<const int> fixed_rows, double* objective,
                                              int* fallback) {
  const int stride = schedule_.at(first_column).compression;
  RowInput in = row_input(d, first_column, count, stride, block, fixed_rows);
  RowResult r = synthesize_row(in);
  if (objective != nullptr) *objective = r.objective;
  if (fallback != nullptr) *fallback += r.fallback_columns;
  if (stride == 1) return r.labels;

  const int n = layers_[d].matrix->size();
  std::vector<int> frames(count);
  for (int k = 0; k < count; ++k) {
    const int anchor = r.labels[k / stride] * stride;
    frames[k] = std::min(anchor + k % stride, n - 1);
  }
  return frames;
}

BlockReport SynthesisEngine::synthesize_block(int count) {
  BlockReport report;
  report.first_column = columns();
  report.columns = count;
  if (count <= 0) return report;
  const int first = columns();
  const int layers = layer_count();
  std::vector<std::vector<int>> block(layers);
  report.row_objectives.assign(layers, 0.0);
  const int sweeps = schedule_.at(first).iterations;
  for (int s = 0; s < sweeps; ++s) {
    for (int d = 0; d < layers; ++d) {
      std::vector<int> use;
      for (int j = 0; j < layers; ++j) {
        if (j != d && (s > 0 || j < d)) use.push_back(j);
      }
      int fallback = 0;
      block[d] = solve_layer(d, first, count, block, use, &report.row_objectives[d], &fallback);
      report.fallback_columns += fallback;
    }
  }
  for (int d = 0; d < layers; ++d) {
    auto& frames = timeline_.layers[d].frames;
    frames.insert(frames.end(), block[d].begin(), block[d].end());
  }
  return report;
}

void SynthesisEngine::truncate(int column) {
  column = std::max(column, 0);
  for (OutputLayer& l : timeline_.layers) {
    if (static_cast<int>(l.frames.size()) > column) l.frames.resize(column);
  }
}

void SynthesisEngine::replace_timeline(OutputTimeline timeline) {
  if (timeline.layers.size() != timeline_.layers.size()) {
    throw InvalidRequest("replacement timeline has the wrong number of layers");
  }
  for (int d = 0; d < layer_count(); ++d) {
    const OutputLayer& l = timeline.layers[d];
    if (l.layer_id != layers_[d].layer_id || l.frames.size() != timeline.layers.front().frames.size()) {
      throw InvalidRequest("replacement timeline does not match layer " + layers_[d].layer_id);
    }
    for (int t : l.frames) {
      if (t < 0 || t >= layers_[d].matrix->size()) {
        throw InvalidRequest("replacement timeline has an out-of-range frame");
      }
    }
  }
  timeline_ = std::move(timeline);
}

double SynthesisEngine::total_energy() const { return total_energy(timeline_); }

double SynthesisEngine::total_energy(const OutputTimeline& timeline) const {
  const int layers = layer_count();
  const int columns = timeline.columns();
  std::vector<double> sigma_t(layers);
  for (int d = 0; d < layers; ++d) {
    const SynthesisParams& p = schedule_.at(0);
    const LayerModel& l = layers_[d];
    sigma_t[d] = p.sigma_t ? *p.sigma_t
                           : default_transition_sigma(*l.matrix, p.dense ? nullptr : l.graph.get());
  }
  double total = 0.0;
  for (int d = 0; d < layers; ++d) {
    const LayerModel& l = layers_[d];
    const auto& frames = timeline.layers[d].frames;
    for (int k = 0; k < columns; ++k) {
      const SynthesisParams& p = schedule_.at(k);
      const int t = frames[k];
      const double ea = action_cost(l.field->row(t), requests_[d].at(k), p.sigma_a);
      double ec = 0.0;
      for (int j = 0; j < layers; ++j) {
        if (j == d) continue;
        ec += lookup_chi(compatibility_, l.actor_id, t, layers_[j].actor_id,
                         timeline.layers[j].frames[k]);
      }
      const int prev = k == 0 ? l.initial_frame : frames[k - 1];
      const double et = transition_cost(*l.matrix, prev, t, sigma_t[d], p.literal_transition);
      total += p.alpha * ea + (1 - p.alpha) * (p.beta * ec + (1 - p.beta) * et);
    }
  }
  return total;
}

int SynthesisEngine::refine(int sweeps) {
  const int layers = layer_count();
  const int count = columns();
  if (count == 0) return 0;
  int accepted = 0;
  double current = total_energy();
  std::vector<std::vector<int>> rows(layers);
  for (int d = 0; d < layers; ++d) rows[d] = timeline_.layers[d].frames;
  for (int s = 0; s < sweeps; ++s) {
    bool improved = false;
    for (int d = 0; d < layers; ++d) {
      std::vector<int> use;
      for (int j = 0; j < layers; ++j) {
        if (j != d) use.push_back(j);
      }
      RowInput in = row_input(d, 0, count, 1, rows, use);
      in.anchor = layers_[d].initial_frame;
      in.compatibility_scale = 2.0;
      RowResult r = synthesize_row(in);
      OutputTimeline candidate = timeline_;
      candidate.layers[d].frames = r.labels;
      const double energy = total_energy(candidate);
      if (energy < current) {
        timeline_ = std::move(candidate);
        rows[d] = r.labels;
        current = energy;
        ++accepted;
        improved = true;
      }
    }
    if (!improved) break;
  }
  return accepted;
}

}  // namespace loopstage
