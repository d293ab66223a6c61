#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "clustcal/core.hpp"

namespace clustcal {

/// One patient: cluster label, binary outcome, predicted risk in (0,1).
struct Record {
  std::string cluster_id;
  int y = 0;
  double p_hat = 0.5;
};

/// Validated records indexed by cluster. Cluster order is the order of first
/// appearance in the records.
class ClusteredDataset {
public:
  ClusteredDataset() = default;

  explicit ClusteredDataset(std::vector<Record> records) : records_(std::move(records)) {
    for (std::size_t i = 0; i < records_.size(); ++i) {
      const auto& r = records_[i];
      if (r.y != 0 && r.y != 1) throw Error(ErrorKind::parse, format("record %zu: outcome must be 0 or 1", i));
      if (!(r.p_hat > 0.0 && r.p_hat < 1.0)) {
        throw Error(ErrorKind::parse, format("record %zu: predicted risk must lie in (0,1)", i));
      }
      auto [it, inserted] = index_.try_emplace(r.cluster_id);
      if (inserted) ids_.push_back(r.cluster_id);
      it->second.push_back(i);
    }
  }

  const std::vector<Record>& records() const { return records_; }
  const std::vector<std::string>& cluster_ids() const { return ids_; }
  std::size_t size() const { return records_.size(); }
  std::size_t n_clusters() const { return ids_.size(); }
  bool empty() const { return records_.empty(); }
  bool has_cluster(const std::string& id) const { return index_.contains(id); }

  const std::vector<std::size_t>& rows(const std::string& id) const {
    const auto it = index_.find(id);
    if (it == index_.end()) throw Error(ErrorKind::unknown_cluster, "unknown cluster '" + id + "'");
    return it->second;
  }

  std::size_t cluster_size(const std::string& id) const { return rows(id).size(); }

  std::vector<double> risks() const {
    std::vector<double> v;
    v.reserve(records_.size());
    for (const auto& r : records_) v.push_back(r.p_hat);
    return v;
  }
  std::vector<double> logit_risks() const {
    std::vector<double> v;
    v.reserve(records_.size());
    for (const auto& r : records_) v.push_back(logit(r.p_hat));
    return v;
  }
  std::vector<double> outcomes() const {
    std::vector<double> v;
    v.reserve(records_.size());
    for (const auto& r : records_) v.push_back(static_cast<double>(r.y));
    return v;
  }

  /// Logit risks and outcomes of one cluster.
  void cluster_data(const std::string& id, std::vector<double>& logit_p, std::vector<double>& y) const {
    const auto& idx = rows(id);
    logit_p.clear();
    y.clear();
    for (auto i : idx) {
      logit_p.push_back(logit(records_[i].p_hat));
      y.push_back(static_cast<double>(records_[i].y));
    }
  }

private:
  std::vector<Record> records_;
  std::vector<std::string> ids_;
  std::map<std::string, std::vector<std::size_t>> index_;
};

}  // namespace clustcal
