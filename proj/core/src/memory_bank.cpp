#include "beliefqa/memory_bank.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "beliefqa/io.hpp"

namespace beliefqa {

namespace {

constexpr char kMagic[4] = {'B', 'M', 'B', '1'};
constexpr std::uint32_t kVersion = 1;

// Unit-normalizes in double precision, then quantizes to f32 for storage.
std::vector<float> normalized_key(const Vec& key) {
  double sq = 0.0;
  for (double v : key) {
    if (!std::isfinite(v)) throw NumericError("memory insert: non-finite key");
    sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (norm < 1e-12) throw NumericError("memory insert: zero-norm key");
  std::vector<float> out(key.size());
  for (std::size_t i = 0; i < key.size(); ++i)
    out[i] = static_cast<float>(key[i] / norm);
  return out;
}

double cosine(const Vec& unit_query, const std::vector<float>& unit_key) {
  double dot = 0.0;
  for (std::size_t i = 0; i < unit_query.size(); ++i)
    dot += unit_query[i] * static_cast<double>(unit_key[i]);
  return std::clamp(dot, -1.0, 1.0);
}

}  // namespace

MemoryBank::MemoryBank(std::size_t d_z, std::size_t d_c, std::size_t capacity,
                       std::uint64_t scope_id)
    : d_z_(d_z), d_c_(d_c), capacity_(capacity), scope_id_(scope_id) {
  if (d_z == 0 || d_c == 0)
    throw ConfigError("memory bank: dimensions must be positive");
  if (capacity == 0) throw ConfigError("memory bank: capacity must be positive");
}

MemoryBank MemoryBank::from_entries(std::size_t d_z, std::size_t d_c,
                                    std::vector<MemoryEntry> entries,
                                    std::size_t capacity,
                                    std::uint64_t scope_id) {
  MemoryBank bank(d_z, d_c, std::max(capacity, entries.size()), scope_id);
  std::uint64_t max_index = 0;
  std::vector<std::uint64_t> seen;
  seen.reserve(entries.size());
  for (const auto& e : entries) {
    if (e.key.size() != d_z || e.value.size() != d_c)
      throw ShapeError("memory bank: entry dimensions do not match bank");
    max_index = std::max(max_index, e.insert_index);
    seen.push_back(e.insert_index);
  }
  std::sort(seen.begin(), seen.end());
  if (std::adjacent_find(seen.begin(), seen.end()) != seen.end())
    throw ConsistencyError("memory bank: duplicate insert_index");
  bank.entries_ = std::move(entries);
  bank.next_index_ = bank.entries_.empty() ? 0 : max_index + 1;
  return bank;
}

void MemoryBank::insert(const Vec& key, const Vec& value, std::uint32_t action,
                        double reward) {
  if (key.size() != d_z_)
    throw ShapeError("memory insert: key has length " +
                     std::to_string(key.size()) + ", bank expects " +
                     std::to_string(d_z_));
  if (value.size() != d_c_)
    throw ShapeError("memory insert: value has length " +
                     std::to_string(value.size()) + ", bank expects " +
                     std::to_string(d_c_));
  for (double v : value) {
    if (!std::isfinite(v))
      throw NumericError("memory insert: non-finite value");
  }
  if (!std::isfinite(reward))
    throw NumericError("memory insert: non-finite reward");

  MemoryEntry e;
  e.key = normalized_key(key);
  e.value.resize(d_c_);
  for (std::size_t i = 0; i < d_c_; ++i)
    e.value[i] = static_cast<float>(value[i]);
  e.action = action;
  e.reward = static_cast<float>(reward);
  e.insert_index = next_index_++;
  entries_.push_back(std::move(e));
  if (entries_.size() > capacity_) entries_.erase(entries_.begin());
}

RetrievalResult MemoryBank::retrieve_topk(const Vec& query, std::size_t k,
                                          double temperature) const {
  if (query.size() != d_z_)
    throw ShapeError("retrieve: query has length " +
                     std::to_string(query.size()) + ", bank expects " +
                     std::to_string(d_z_));
  if (k == 0) throw ContractError("retrieve: k must be at least 1");
  if (temperature <= 0.0)
    throw ConfigError("retrieve: temperature must be positive");

  double sq = 0.0;
  for (double v : query) {
    if (!std::isfinite(v)) throw NumericError("retrieve: non-finite query");
    sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (norm < 1e-12) throw NumericError("retrieve: zero-norm query");
  Vec unit(query.size());
  for (std::size_t i = 0; i < query.size(); ++i) unit[i] = query[i] / norm;

  RetrievalResult result;
  if (entries_.empty()) {
    result.cold_start = true;
    return result;
  }

  struct Scored {
    double sim;
    std::uint64_t insert_index;
    std::size_t pos;
  };
  std::vector<Scored> scored;
  scored.reserve(entries_.size());
  for (std::size_t i = 0; i < entries_.size(); ++i)
    scored.push_back({cosine(unit, entries_[i].key), entries_[i].insert_index, i});

  const std::size_t take = std::min(k, scored.size());
  auto better = [](const Scored& a, const Scored& b) {
    if (a.sim != b.sim) return a.sim > b.sim;
    return a.insert_index < b.insert_index;
  };
  std::partial_sort(scored.begin(), scored.begin() + take, scored.end(), better);

  result.indices.reserve(take);
  result.similarities.reserve(take);
  for (std::size_t i = 0; i < take; ++i) {
    result.indices.push_back(scored[i].insert_index);
    result.similarities.push_back(scored[i].sim);
  }
  Vec scaled = result.similarities;
  for (double& s : scaled) s /= temperature;
  result.weights = softmax(scaled);
  return result;
}

const MemoryEntry* MemoryBank::find(std::uint64_t insert_index) const {
  for (const auto& e : entries_)
    if (e.insert_index == insert_index) return &e;
  return nullptr;
}

void MemoryBank::clear(std::uint64_t new_scope_id) {
  entries_.clear();
  scope_id_ = new_scope_id;
}

BeliefVector aggregate_belief(const RetrievalResult& result,
                              const MemoryBank& bank) {
  BeliefVector belief;
  belief.provenance = result;
  belief.values.assign(bank.dim_value(), 0.0);
  if (result.indices.empty()) {
    belief.is_cold_start = true;
    return belief;
  }
  for (std::size_t k = 0; k < result.indices.size(); ++k) {
    const MemoryEntry* e = bank.find(result.indices[k]);
    if (e == nullptr)
      throw ConsistencyError("aggregate: entry " +
                             std::to_string(result.indices[k]) +
                             " is no longer in the bank");
    const double w = result.weights[k];
    for (std::size_t i = 0; i < belief.values.size(); ++i)
      belief.values[i] += w * static_cast<double>(e->value[i]);
  }
  return belief;
}

std::uint64_t save_bank(const MemoryBank& bank, const std::string& path) {
  BinaryWriter w(path);
  w.bytes(kMagic, 4);
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(bank.dim_key()));
  w.u32(static_cast<std::uint32_t>(bank.dim_value()));
  w.u64(bank.size());
  for (const auto& e : bank.entries()) {
    for (float v : e.key) w.f32(v);
    for (float v : e.value) w.f32(v);
    w.u32(e.action);
    w.f32(e.reward);
    w.u64(e.insert_index);
  }
  const std::uint64_t written = w.offset();
  w.close();
  return written;
}

MemoryBank load_bank(const std::string& path) {
  BinaryReader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (!std::equal(magic, magic + 4, kMagic))
    throw FormatError(path + ": not a bank file (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw FormatError(path + ": unsupported bank version " +
                      std::to_string(version));
  const std::uint32_t d_z = r.u32();
  const std::uint32_t d_c = r.u32();
  if (d_z == 0 || d_c == 0)
    throw FormatError(path + ": zero dimension in header");
  const std::uint64_t count = r.u64();

  std::vector<MemoryEntry> entries;
  entries.reserve(count);
  for (std::uint64_t n = 0; n < count; ++n) {
    MemoryEntry e;
    e.key.resize(d_z);
    for (auto& v : e.key) v = r.f32();
    e.value.resize(d_c);
    for (auto& v : e.value) v = r.f32();
    e.action = r.u32();
    e.reward = r.f32();
    e.insert_index = r.u64();

    double sq = 0.0;
    for (float v : e.key) {
      if (!std::isfinite(v))
        throw FormatError(path + ": non-finite key in entry " +
                          std::to_string(n));
      sq += static_cast<double>(v) * static_cast<double>(v);
    }
    if (std::fabs(std::sqrt(sq) - 1.0) > 1e-6)
      throw FormatError(path + ": key in entry " + std::to_string(n) +
                        " is not unit norm");
    entries.push_back(std::move(e));
  }
  if (!r.at_eof())
    throw FormatError(path + ": trailing bytes after entry " +
                      std::to_string(count));
  return MemoryBank::from_entries(d_z, d_c, std::move(entries));
}

}  // namespace beliefqa
