#include "loopstage/compatibility.hpp"

#include <algorithm>
#include <sstream>

#include "loopstage/error.hpp"

namespace loopstage {
namespace {

ClusterSide initial_side(ActorClusterSource source) {
  ClusterSide side;
  side.cluster_examples.resize(source.action_count);
  for (const auto& [frame, action] : source.action_examples) {
    side.cluster_examples.at(action).push_back(frame);
  }
  side.source = std::move(source);
  side.source.params.require_every_class = false;
  side.repropagate();
  return side;
}

// Applies one side of a tag; returns the cluster the frame now belongs to and
// whether a new cluster was created.
std::pair<int, bool> apply_side(ClusterSide& side, int frame, TagMode mode) {
  if (frame < 0 || frame >= side.source.matrix->size()) {
    throw InvalidRequest("frame " + std::to_string(frame) + " out of range for actor '" +
                         side.source.actor_id + "'");
  }
  const int previous = side.cluster_of_example(frame);
  if (mode == TagMode::kRefine) {
    const int target = side.memberships.argmax(frame);
    if (previous != target) {
      if (previous >= 0) std::erase(side.cluster_examples[previous], frame);
      side.cluster_examples[target].push_back(frame);
      side.repropagate();
    }
    return {target, false};
  }
  if (previous >= 0) std::erase(side.cluster_examples[previous], frame);
  side.cluster_examples.push_back({frame});
  side.repropagate();
  return {side.cluster_count() - 1, true};
}

const char* verdict_name(Verdict v) {
  return v == Verdict::kCompatible ? "compatible" : "incompatible";
}

}  // namespace

void CompatibilityMatrix::add_row() {
  cells_.resize(cells_.size() + cols_, kCompatibleCost);
  ++rows_;
}

void CompatibilityMatrix::add_col() {
  std::vector<double> next(static_cast<std::size_t>(rows_) * (cols_ + 1), kCompatibleCost);
  for (int m = 0; m < rows_; ++m) {
    std::copy_n(cells_.begin() + static_cast<std::ptrdiff_t>(m) * cols_, cols_,
                next.begin() + static_cast<std::ptrdiff_t>(m) * (cols_ + 1));
  }
  cells_ = std::move(next);
  ++cols_;
}

int CompatibilityMatrix::incompatible_cells() const {
  return static_cast<int>(std::count(cells_.begin(), cells_.end(), kIncompatibleCost));
}

int ClusterSide::cluster_of_example(int frame) const {
  for (int c = 0; c < cluster_count(); ++c) {
    const auto& ex = cluster_examples[c];
    if (std::find(ex.begin(), ex.end(), frame) != ex.end()) return c;
  }
  return -1;
}

void ClusterSide::repropagate() {
  ActionExamples examples;
  for (int c = 0; c < cluster_count(); ++c) {
    for (int frame : cluster_examples[c]) examples[frame] = c;
  }
  memberships = propagate_labels(*source.matrix, examples, cluster_count(), source.params).field;
}

PairCompatibility::PairCompatibility(ActorClusterSource a, ActorClusterSource b)
    : a_(initial_side(std::move(a))), b_(initial_side(std::move(b))),
      matrix_(a_.cluster_count(), b_.cluster_count()) {}

double PairCompatibility::chi(int frame_a, int frame_b) const {
  const auto ca = a_.memberships.row(frame_a);
  const auto cb = b_.memberships.row(frame_b);
  double sum = 0.0;
  for (int m = 0; m < matrix_.rows(); ++m) {
    if (ca[m] == 0.0) continue;
    double inner = 0.0;
    for (int n = 0; n < matrix_.cols(); ++n) inner += cb[n] * matrix_.at(m, n);
    sum += ca[m] * inner;
  }
  return sum;
}

std::vector<double> PairCompatibility::chi_row_for_b(int frame_b) const {
  const auto cb = b_.memberships.row(frame_b);
  std::vector<double> weights(matrix_.rows(), 0.0);
  for (int m = 0; m < matrix_.rows(); ++m) {
    for (int n = 0; n < matrix_.cols(); ++n) weights[m] += cb[n] * matrix_.at(m, n);
  }
  return weights;
}

std::vector<double> PairCompatibility::chi_row_for_a(int frame_a) const {
  const auto ca = a_.memberships.row(frame_a);
  std::vector<double> weights(matrix_.cols(), 0.0);
  for (int m = 0; m < matrix_.rows(); ++m) {
    for (int n = 0; n < matrix_.cols(); ++n) weights[n] += ca[m] * matrix_.at(m, n);
  }
  return weights;
}

Verdict PairCompatibility::current_verdict(int frame_a, int frame_b) const {
  const double cell = matrix_.at(a_.memberships.argmax(frame_a), b_.memberships.argmax(frame_b));
  return cell == kIncompatibleCost ? Verdict::kIncompatible : Verdict::kCompatible;
}

void PairCompatibility::tag(int frame_a, int frame_b, Verdict verdict,
                            std::optional<TagMode> mode_a, std::optional<TagMode> mode_b) {
  if (!mode_a || !mode_b) {
    if (verdict == current_verdict(frame_a, frame_b)) {
      throw InvalidRequest(std::string("frames are already ") + verdict_name(verdict) +
                           "; choose specialize or refine for each side");
    }
    mode_a = mode_a.value_or(TagMode::kSpecialize);
    mode_b = mode_b.value_or(TagMode::kSpecialize);
  }
  const auto [cluster_a, grew_a] = apply_side(a_, frame_a, *mode_a);
  if (grew_a) matrix_.add_row();
  const auto [cluster_b, grew_b] = apply_side(b_, frame_b, *mode_b);
  if (grew_b) matrix_.add_col();
  if (grew_a || grew_b) matrix_.set(cluster_a, cluster_b, verdict);
}

std::string PairCompatibility::export_text() const {
  std::ostringstream out;
  out << "pair " << actor_a() << ' ' << actor_b() << '\n';
  for (const ClusterSide* side : {&a_, &b_}) {
    out << "clusters " << side->source.actor_id << '\n';
    for (int c = 0; c < side->cluster_count(); ++c) {
      out << "  " << c << ':';
      for (int f : side->cluster_examples[c]) out << ' ' << f;
      out << '\n';
    }
  }
  out << "B " << matrix_.rows() << 'x' << matrix_.cols() << '\n';
  for (int m = 0; m < matrix_.rows(); ++m) {
    out << ' ';
    for (int n = 0; n < matrix_.cols(); ++n) out << ' ' << matrix_.at(m, n);
    out << '\n';
  }
  return out.str();
}

nlohmann::json PairCompatibility::to_json() const {
  nlohmann::json j;
  j["actors"] = {actor_a(), actor_b()};
  j["clusters_a"] = a_.cluster_examples;
  j["clusters_b"] = b_.cluster_examples;
  std::vector<std::vector<double>> cells(matrix_.rows(), std::vector<double>(matrix_.cols()));
  for (int m = 0; m < matrix_.rows(); ++m) {
    for (int n = 0; n < matrix_.cols(); ++n) cells[m][n] = matrix_.at(m, n);
  }
  j["B"] = cells;
  return j;
}

PairCompatibility PairCompatibility::from_json(const nlohmann::json& j, ActorClusterSource a,
                                               ActorClusterSource b) {
  PairCompatibility pair;
  pair.a_.source = std::move(a);
  pair.b_.source = std::move(b);
  pair.a_.source.params.require_every_class = false;
  pair.b_.source.params.require_every_class = false;
  pair.a_.cluster_examples = j.at("clusters_a").get<std::vector<std::vector<int>>>();
  pair.b_.cluster_examples = j.at("clusters_b").get<std::vector<std::vector<int>>>();
  pair.a_.repropagate();
  pair.b_.repropagate();
  const auto cells = j.at("B").get<std::vector<std::vector<double>>>();
  pair.matrix_ = CompatibilityMatrix(pair.a_.cluster_count(), pair.b_.cluster_count());
  if (static_cast<int>(cells.size()) != pair.matrix_.rows()) {
    throw AssetError("compatibility B has wrong row count for pair " + pair.actor_a() + "/" +
                     pair.actor_b());
  }
  for (int m = 0; m < pair.matrix_.rows(); ++m) {
    if (static_cast<int>(cells[m].size()) != pair.matrix_.cols()) {
      throw AssetError("compatibility B has wrong column count");
    }
    for (int n = 0; n < pair.matrix_.cols(); ++n) {
      if (cells[m][n] != kCompatibleCost && cells[m][n] != kIncompatibleCost) {
        throw AssetError("compatibility B cells must be 1 or 100");
      }
      pair.matrix_.set(m, n, cells[m][n] == kIncompatibleCost ? Verdict::kIncompatible
                                                               : Verdict::kCompatible);
    }
  }
  return pair;
}

std::pair<std::string, std::string> pair_key(std::string_view a, std::string_view b) {
  if (b < a) std::swap(a, b);
  return {std::string(a), std::string(b)};
}

void CompatibilityModel::add_pair(PairCompatibility pair) {
  auto key = pair_key(pair.actor_a(), pair.actor_b());
  std::lock_guard lock(mutex_);
  pairs_[key] = std::make_shared<const PairCompatibility>(std::move(pair));
}

CompatibilityModel::Snapshot CompatibilityModel::snapshot() const {
  std::lock_guard lock(mutex_);
  return pairs_;
}

std::shared_ptr<const PairCompatibility> CompatibilityModel::find(std::string_view a,
                                                                  std::string_view b) const {
  std::lock_guard lock(mutex_);
  auto it = pairs_.find(pair_key(a, b));
  return it == pairs_.end() ? nullptr : it->second;
}

void CompatibilityModel::tag(std::string_view actor_x, int frame_x, std::string_view actor_y,
                             int frame_y, Verdict verdict, std::optional<TagMode> mode_x,
                             std::optional<TagMode> mode_y) {
  std::lock_guard lock(mutex_);
  auto it = pairs_.find(pair_key(actor_x, actor_y));
  if (it == pairs_.end()) {
    throw InvalidRequest("no compatibility model for actors '" + std::string(actor_x) +
                         "' and '" + std::string(actor_y) + "'");
  }
  auto next = std::make_shared<PairCompatibility>(*it->second);
  if (next->actor_a() == actor_x) {
    next->tag(frame_x, frame_y, verdict, mode_x, mode_y);
  } else {
    next->tag(frame_y, frame_x, verdict, mode_y, mode_x);
  }
  it->second = std::move(next);
}

double lookup_chi(const CompatibilityModel::Snapshot& snapshot, std::string_view actor_x,
                  int frame_x, std::string_view actor_y, int frame_y) {
  auto it = snapshot.find(pair_key(actor_x, actor_y));
  if (it == snapshot.end()) return kCompatibleCost;
  const PairCompatibility& pair = *it->second;
  return pair.actor_a() == actor_x ? pair.chi(frame_x, frame_y) : pair.chi(frame_y, frame_x);
}

}  // namespace loopstage
