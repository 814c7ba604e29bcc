#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <map>
#include <mutex>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "sfuda/common.hpp"
#include "sfuda/dataset.hpp"
#include "sfuda/nn.hpp"
#include "sfuda/refine.hpp"
#include "sfuda/tensor.hpp"

namespace sfuda {

struct GuardDecision {
  bool accepted = true;
  std::vector<std::string> rejected_ids;  // content digests of offenders
};

// The sealed source side. Holds the N source models and the content digests
// of every sample that must never be answered (all source and target data,
// registered at setup). Only hard labels ever leave through the session API.
class SourceEnsemble {
 public:
  SourceEnsemble(std::vector<Model> models, int num_classes)
      : models_(std::move(models)), num_classes_(num_classes) {
    if (models_.empty()) throw ConfigError("ensemble needs at least 1 model");
    for (const auto& m : models_)
      if (m.num_classes() != num_classes_)
        throw ConfigError("ensemble models disagree on num_classes");
  }

  int num_classes() const { return num_classes_; }
  size_t model_count() const { return models_.size(); }

  void register_forbidden(const ImageTensor& images) {
    for (int i = 0; i < images.n; ++i)
      forbidden_.insert(content_digest(images, i));
  }
  void register_forbidden(const LabeledDataset& d) { register_forbidden(d.images); }
  void register_forbidden(const UnlabeledDataset& d) { register_forbidden(d.images); }
  size_t forbidden_count() const { return forbidden_.size(); }

  // Exact content-digest match; perturbed bytes are a different sample and
  // pass. Rejection is a result, not a failure.
  GuardDecision boundary_guard(const ImageTensor& batch) const {
    GuardDecision d;
    for (int i = 0; i < batch.n; ++i) {
      const std::string digest = content_digest(batch, i);
      if (forbidden_.count(digest) > 0) {
        d.accepted = false;
        d.rejected_ids.push_back(digest);
      }
    }
    return d;
  }

  // softmax of the arithmetic mean of the N models' logits (mean before
  // softmax). Throws on guard rejection; sessions pre-check instead.
  Matrix ensemble_confidence(const ImageTensor& x) const {
    const GuardDecision d = boundary_guard(x);
    if (!d.accepted)
      throw BoundaryViolationError("query contains forbidden samples",
                                   d.rejected_ids);
    return mean_confidence_unguarded(x);
  }

  // Harness-side measurement for the no-adaptation baseline; not reachable
  // through the session protocol.
  double source_only_accuracy(const LabeledDataset& test) const {
    const Matrix conf = mean_confidence_unguarded(test.images);
    int correct = 0;
    for (int i = 0; i < conf.rows; ++i)
      if (argmax_row(conf.row(i)) == test.labels[static_cast<size_t>(i)]) ++correct;
    return 100.0 * correct / conf.rows;
  }

  Matrix mean_confidence_unguarded(const ImageTensor& x) const {
    const int k = num_classes_;
    Matrix out(x.n, k);
    std::vector<Matrix> all_logits;
    all_logits.reserve(models_.size());
    for (const auto& m : models_) all_logits.push_back(m.logits(x));
    const double inv_n = 1.0 / static_cast<double>(models_.size());
    std::vector<float> mean_row(static_cast<size_t>(k));
    for (int i = 0; i < x.n; ++i) {
      for (int c = 0; c < k; ++c) {
        double acc = 0.0;
        for (const auto& lg : all_logits) acc += static_cast<double>(lg.at(i, c));
        mean_row[static_cast<size_t>(c)] = static_cast<float>(acc * inv_n);
      }
      softmax_row<float>(mean_row, out.row(i));
    }
    return out;
  }

 private:
  std::vector<Model> models_;
  int num_classes_;
  std::unordered_set<std::string> forbidden_;
};

struct QueryEvent {
  enum class Kind { open, submit_accepted, submit_rejected, finalize };
  Kind kind;
  std::uint64_t session = 0;
  int samples = 0;
  std::vector<std::string> rejected_ids;
  std::chrono::system_clock::time_point when;
};

// Append-only audit trail of everything that crossed the oracle boundary.
class QueryLog {
 public:
  void append(QueryEvent e) {
    e.when = std::chrono::system_clock::now();
    events_.push_back(std::move(e));
  }
  const std::vector<QueryEvent>& events() const { return events_; }

  long answered_samples() const {
    long n = 0;
    for (const auto& e : events_)
      if (e.kind == QueryEvent::Kind::submit_accepted) n += e.samples;
    return n;
  }
  int rejection_count() const {
    int n = 0;
    for (const auto& e : events_)
      if (e.kind == QueryEvent::Kind::submit_rejected) ++n;
    return n;
  }
  int session_count() const {
    int n = 0;
    for (const auto& e : events_)
      if (e.kind == QueryEvent::Kind::open) ++n;
    return n;
  }
  // No forbidden sample may ever be part of an answered session.
  bool clean() const {
    for (const auto& e : events_)
      if (e.kind == QueryEvent::Kind::submit_accepted && !e.rejected_ids.empty())
        return false;
    return true;
  }

 private:
  std::vector<QueryEvent> events_;
};

struct SubmitResult {
  int accepted = 0;
  std::vector<std::string> rejected_ids;  // batch refused when non-empty
};

// Two-phase sessions (submit everything, then finalize) because refinement's
// column sums run over the full query set. Thread-safe; sessions from
// concurrent clients interleave freely.
class OracleService {
 public:
  explicit OracleService(SourceEnsemble ensemble)
      : ensemble_(std::move(ensemble)) {}

  int num_classes() const { return ensemble_.num_classes(); }
  const SourceEnsemble& ensemble() const { return ensemble_; }
  SourceEnsemble& ensemble() { return ensemble_; }

  std::uint64_t open() {
    std::lock_guard<std::mutex> lock(mu_);
    const std::uint64_t id = next_id_++;
    sessions_[id];
    log_.append({QueryEvent::Kind::open, id, 0, {}, {}});
    return id;
  }

  SubmitResult submit(std::uint64_t session, const ImageTensor& batch) {
    std::lock_guard<std::mutex> lock(mu_);
    Session& s = find_session(session);
    if (s.finalized)
      throw ProtocolError("submit after finalize on session " + std::to_string(session));
    if (batch.n < 1) throw ProtocolError("empty batch");
    const GuardDecision d = ensemble_.boundary_guard(batch);
    if (!d.accepted) {
      log_.append({QueryEvent::Kind::submit_rejected, session, batch.n,
                   d.rejected_ids, {}});
      return {0, d.rejected_ids};
    }
    if (s.batches.empty()) {
      s.w = batch.w; s.h = batch.h; s.c = batch.c;
    } else if (batch.w != s.w || batch.h != s.h || batch.c != s.c) {
      throw ProtocolError("batch shape differs from session");
    }
    s.batches.push_back(batch);
    s.total += batch.n;
    log_.append({QueryEvent::Kind::submit_accepted, session, batch.n, {}, {}});
    return {batch.n, {}};
  }

  // Hard labels for every submitted sample, in submission order. Internally
  // samples are processed in content-digest order, so the result depends
  // only on the multiset of submitted samples.
  std::vector<int> finalize(std::uint64_t session) {
    std::lock_guard<std::mutex> lock(mu_);
    Session& s = find_session(session);
    if (s.finalized) return s.labels;
    if (s.total == 0)
      throw ProtocolError("finalize on empty session " + std::to_string(session));

    ImageTensor all(s.total, s.w, s.h, s.c);
    int at = 0;
    for (const auto& b : s.batches) {
      std::copy(b.data.begin(), b.data.end(),
                all.data.begin() + static_cast<long>(at) * static_cast<long>(all.sample_size()));
      at += b.n;
    }

    std::vector<std::string> digests(static_cast<size_t>(s.total));
    for (int i = 0; i < s.total; ++i) digests[static_cast<size_t>(i)] = content_digest(all, i);
    std::vector<int> order(static_cast<size_t>(s.total));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      return digests[static_cast<size_t>(a)] < digests[static_cast<size_t>(b)];
    });

    ImageTensor sorted(s.total, s.w, s.h, s.c);
    for (int i = 0; i < s.total; ++i) {
      const auto src = all.sample(order[static_cast<size_t>(i)]);
      std::copy(src.begin(), src.end(), sorted.sample(i).begin());
    }

    const Matrix conf = ensemble_.mean_confidence_unguarded(sorted);
    const Matrix refined = depict_refine(conf);
    s.labels.assign(static_cast<size_t>(s.total), 0);
    for (int i = 0; i < s.total; ++i)
      s.labels[static_cast<size_t>(order[static_cast<size_t>(i)])] =
          argmax_row(refined.row(i));

    s.finalized = true;
    s.batches.clear();
    log_.append({QueryEvent::Kind::finalize, session, s.total, {}, {}});
    return s.labels;
  }

  const QueryLog& log() const { return log_; }

 private:
  struct Session {
    std::vector<ImageTensor> batches;
    int total = 0;
    int w = 0, h = 0, c = 0;
    bool finalized = false;
    std::vector<int> labels;
  };

  Session& find_session(std::uint64_t id) {
    const auto it = sessions_.find(id);
    if (it == sessions_.end())
      throw ProtocolError("unknown session " + std::to_string(id));
    return it->second;
  }

  SourceEnsemble ensemble_;
  QueryLog log_;
  std::map<std::uint64_t, Session> sessions_;
  std::uint64_t next_id_ = 1;
  std::mutex mu_;
};

// Client-side view of an oracle; the pipeline is written against this so
// in-process and TCP oracles are interchangeable.
class OracleApi {
 public:
  virtual ~OracleApi() = default;
  virtual int num_classes() = 0;
  virtual std::uint64_t open() = 0;
  // throws BoundaryViolationError when the batch is refused
  virtual int submit(std::uint64_t session, const ImageTensor& batch) = 0;
  virtual std::vector<int> finalize(std::uint64_t session) = 0;

  // submit-all / finalize convenience; one session per call
  std::vector<int> query_dataset(const UnlabeledDataset& data,
                                 int batch_size = 256) {
    const std::uint64_t id = open();
    ++sessions_used_;
    for (int lo = 0; lo < data.images.n; lo += batch_size) {
      const int hi = std::min(data.images.n, lo + batch_size);
      submit(id, data.images.slice(lo, hi));
      samples_queried_ += hi - lo;
    }
    return finalize(id);
  }

  int sessions_used() const { return sessions_used_; }
  long samples_queried() const { return samples_queried_; }

 private:
  int sessions_used_ = 0;
  long samples_queried_ = 0;
};

class InProcOracle final : public OracleApi {
 public:
  explicit InProcOracle(OracleService& svc) : svc_(&svc) {}
  int num_classes() override { return svc_->num_classes(); }
  std::uint64_t open() override { return svc_->open(); }
  int submit(std::uint64_t session, const ImageTensor& batch) override {
    const SubmitResult r = svc_->submit(session, batch);
    if (!r.rejected_ids.empty())
      throw BoundaryViolationError("oracle rejected batch", r.rejected_ids);
    return r.accepted;
  }
  std::vector<int> finalize(std::uint64_t session) override {
    return svc_->finalize(session);
  }

 private:
  OracleService* svc_;
};

}  // namespace sfuda
