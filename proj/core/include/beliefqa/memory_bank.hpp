#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "beliefqa/errors.hpp"
#include "beliefqa/numerics.hpp"

namespace beliefqa {

/// One remembered step: a unit-norm embedding key, the context payload that
/// was observed with it, and the action/reward outcome. Keys and payloads are
/// stored as f32, exactly as they sit in the bank file, so persistence is
/// bit-exact. insert_index is the entry's stable identity across evictions
/// and reorderings.
struct MemoryEntry {
  std::vector<float> key;
  std::vector<float> value;
  std::uint32_t action = 0;
  float reward = 0.0f;
  std::uint64_t insert_index = 0;
};

/// Outcome of a top-K scan. indices are insert_index values, best match
/// first; ties in similarity are broken by ascending insert_index. weights
/// are the softmax of similarities over the returned entries only.
struct RetrievalResult {
  std::vector<std::uint64_t> indices;
  Vec similarities;
  Vec weights;
  bool cold_start = false;

  std::size_t count() const { return indices.size(); }
};

/// Similarity-weighted pooling of the retrieved payloads. On a cold start
/// (empty retrieval) values is the zero vector.
struct BeliefVector {
  Vec values;
  RetrievalResult provenance;
  bool is_cold_start = false;
};

/// Bounded FIFO store of MemoryEntry with exact cosine retrieval. Retrieval
/// and aggregation are const and safe to call from several readers; insert
/// and clear need exclusive access.
class MemoryBank {
 public:
  MemoryBank(std::size_t d_z, std::size_t d_c, std::size_t capacity = 4096,
             std::uint64_t scope_id = 0);

  /// Adopts pre-built entries as-is (any storage order, keys already f32).
  /// Used by the loader and by tests that need a permuted bank.
  static MemoryBank from_entries(std::size_t d_z, std::size_t d_c,
                                 std::vector<MemoryEntry> entries,
                                 std::size_t capacity = 4096,
                                 std::uint64_t scope_id = 0);

  /// Normalizes the key (in double, then quantizes to f32), appends the
  /// entry under the next insert_index, and evicts the oldest entry when
  /// over capacity.
  void insert(const Vec& key, const Vec& value, std::uint32_t action,
              double reward);

  /// Exact scan over all entries. Similarities are computed in double,
  /// clamped to [-1, 1]; at most k entries come back, fewer when the bank
  /// holds fewer. An empty bank yields a cold-start result.
  RetrievalResult retrieve_topk(const Vec& query, std::size_t k,
                                double temperature = 1.0) const;

  /// Entry lookup by insert_index; nullptr when the entry was evicted or
  /// never existed.
  const MemoryEntry* find(std::uint64_t insert_index) const;

  /// Drops all entries and rebinds the bank to a new session scope. The
  /// insert counter keeps running so indices stay unique across scopes.
  void clear(std::uint64_t new_scope_id);

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t dim_key() const { return d_z_; }
  std::size_t dim_value() const { return d_c_; }
  std::size_t capacity() const { return capacity_; }
  std::uint64_t scope_id() const { return scope_id_; }
  std::uint64_t next_index() const { return next_index_; }
  const std::vector<MemoryEntry>& entries() const { return entries_; }

 private:
  std::size_t d_z_;
  std::size_t d_c_;
  std::size_t capacity_;
  std::uint64_t scope_id_;
  std::uint64_t next_index_ = 0;
  std::vector<MemoryEntry> entries_;
};

/// b = sum_k w_k c_k over the retrieved entries, accumulated in double.
/// Referencing an entry that has since been evicted raises ConsistencyError.
BeliefVector aggregate_belief(const RetrievalResult& result,
                              const MemoryBank& bank);

/// Writes the bank file and returns the byte count.
std::uint64_t save_bank(const MemoryBank& bank, const std::string& path);

/// Parses a bank file. Rejects wrong magic, unknown versions, truncation and
/// trailing bytes; capacity comes back as max(4096, count).
MemoryBank load_bank(const std::string& path);

}  // namespace beliefqa
