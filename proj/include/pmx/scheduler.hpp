// Copyright (c) 2026 The pmx Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "pmx/common.hpp"
#include "pmx/corpus.hpp"

namespace pmx {

enum class ExperimentKind {
    insert_uniform,
    insert_window,
    repeat_tiered,
    replace_batch,
    duplicate_split,
    dynamic_hook,
    embed_noise,
};

enum class TokenClass { iid, ood, unusual };

std::string to_string(ExperimentKind kind);
std::string to_string(TokenClass cls);
ExperimentKind experiment_kind_from_string(const std::string& s);
TokenClass token_class_from_string(const std::string& s);

struct Experiment {
    std::string id;
    ExperimentKind kind = ExperimentKind::insert_uniform;
    std::int64_t budget_tokens = 0;   // exact token budget; 0 when fraction is used
    double budget_fraction = 0.0;     // fraction of the stream; 0 when tokens are used
    int window_begin = 0;
    int window_end = -1;              // -1 means n_steps
    std::vector<int> repetitions;
    std::string payload_source;
    std::uint64_t seed = 0;
    TokenClass token_class = TokenClass::ood;
    std::map<std::string, double> params;  // kind-specific knobs

    std::int64_t resolve_budget(std::int64_t stream_tokens) const;
    std::pair<int, int> resolve_window(int n_steps) const;
};

struct ExperimentManifest {
    std::uint64_t seed = 0;
    std::vector<Experiment> experiments;

    void validate(const StreamDims& dims) const;
    std::string to_json() const;
    static ExperimentManifest from_json(const std::string& text);
};

// One payload item to be placed; repetitions controls how many copies the
// tiered kinds place.
struct PayloadItem {
    std::vector<Token> tokens;
    int repetitions = 1;
};

// Experiment id -> payload items. Filled by whoever assembles the run.
using PayloadCatalog = std::map<std::string, std::vector<PayloadItem>>;

struct Placement {
    int experiment = -1;  // index into manifest experiments; -1 for exclusion repair
    int step = 0;
    int slot = 0;
    int offset = 0;
    int length = 0;
    std::uint32_t payload = 0;  // index into Schedule::payloads
};

struct NoisePlacement {
    int experiment = -1;
    int step = 0;
    int slot = 0;
    std::uint64_t seed = 0;
    double sigma = 0.0;
};

struct LedgerEntry {
    std::string experiment_id;
    int step = 0;
    int slot = 0;  // -1 for whole-batch entries
    int offset = 0;
    int length = 0;
    TokenClass cls = TokenClass::ood;
    std::uint32_t payload = 0;
    int identical = 0;  // placed tokens equal to the base tokens they replace
};

struct InterventionLedger {
    std::vector<LedgerEntry> entries;

    std::int64_t total_tokens() const;
    std::int64_t total_identical() const;
    std::map<std::string, std::int64_t> per_experiment_tokens() const;
    std::string to_csv() const;
};

struct AccountingRow {
    std::string experiment_id;
    std::int64_t tokens = 0;
    double fraction = 0.0;
    TokenClass cls = TokenClass::ood;
};

std::vector<AccountingRow> accounting(const InterventionLedger& ledger, const StreamDims& dims);

struct Schedule {
    std::uint64_t stream_identity = 0;
    StreamDims dims;
    std::vector<Placement> placements;  // sorted by (step, slot, offset)
    std::vector<NoisePlacement> noise;
    std::vector<std::vector<Token>> payloads;

    std::string to_json() const;
    static Schedule from_json(const std::string& text);
};

std::uint64_t stream_identity(const TokenStream& stream);

struct CompileOptions {
    // Replacement source for sequences of the base stream that contain a
    // forbidden sequence. Required whenever the scan finds an occurrence.
    const TokenStream* exclusion_source = nullptr;
};

struct CompileResult {
    Schedule schedule;
    InterventionLedger ledger;
};

// Compiles a manifest into exact, non-overlapping token placements over the
// stream. Payloads containing a forbidden sequence abort compilation; base
// sequences containing one are replaced from the exclusion source and
// recorded as "__exclusion" ledger entries.
CompileResult compile(const ExperimentManifest& manifest, const TokenStream& stream,
                      const std::vector<std::vector<Token>>& forbidden,
                      const PayloadCatalog& catalog, const CompileOptions& options = {});

// MUSE-style duplication/splitting. Conditions 1-3 repeat the whole article
// {1,10,100} times; 4-6 apply one random 7-way split and repeat the pieces;
// 7-9 re-split independently per duplicate.
std::vector<std::vector<Token>> duplicate_split(const std::vector<Token>& article, int condition,
                                                Rng& rng);

struct Violation {
    int step = 0;
    int slot = 0;
    int offset = 0;
    int forbidden_index = 0;
};

// Scans full sequences for verbatim occurrences of the forbidden sequences
// (each of length >= 8). Matches never straddle sequence boundaries.
std::vector<Violation> scan_exclude(const StreamView& view, const std::vector<std::vector<Token>>& forbidden);
std::vector<Violation> scan_exclude(const StreamView& view, const std::vector<std::vector<Token>>& forbidden,
                                    int step_begin, int step_end);

// FNV-1a 64-bit digest over token ids in canonical (step, slot, pos) order,
// two little-endian bytes per token.
std::uint64_t stream_hash(const StreamView& view, int step_begin, int step_end);
std::uint64_t stream_hash(const StreamView& view);

// Digest skipping coordinates covered by the given placements.
std::uint64_t stream_hash_excluding(const StreamView& view, int step_begin, int step_end,
                                    const std::vector<Placement>& skip);

// Base stream plus applied schedule plus a dynamic overlay. Static placements
// are immutable after construction; dynamic placements may only be appended
// for steps that have not been read yet (enforced by the caller).
class TrainingStream : public StreamView {
public:
    TrainingStream(const TokenStream& base, const Schedule& schedule);

    StreamDims dims() const override { return base_->dims(); }
    void fill_sequence(int step, int slot, Token* out) const override;

    const TokenStream& base() const { return *base_; }
    const Schedule& schedule() const { return *schedule_; }

    // Places one payload uniformly at random inside the step window, avoiding
    // all existing placements. Returns the ledger entry describing it.
    LedgerEntry place_dynamic(const std::string& experiment_id, TokenClass cls,
                              const std::vector<Token>& payload, int window_begin, int window_end,
                              Rng& rng);

    // Replaces the whole batch at `step` with the given sequences.
    LedgerEntry replace_batch(const std::string& experiment_id, int step,
                              const std::vector<std::vector<Token>>& batch, TokenClass cls);

    const std::vector<Placement>& dynamic_placements() const { return dyn_placements_; }
    const std::vector<std::vector<Token>>& dynamic_payloads() const { return dyn_payloads_; }

    // Serialization of the dynamic overlay for checkpoint resume.
    void save_overlay(std::string& out) const;
    void load_overlay(const std::string& in);

private:
    void index_placement(const Placement& p, bool dynamic);
    bool range_free(int step, int slot, int offset, int length) const;

    const TokenStream* base_;
    const Schedule* schedule_;
    std::vector<Placement> dyn_placements_;
    std::vector<std::vector<Token>> dyn_payloads_;
    // (step, slot) -> placement indices; dynamic indices offset by 1<<30.
    std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> index_;
};

// Builder-style batch replacement used at manifest level: appends a
// replace_batch experiment for `step` sourced from the holdout stream.
void add_batch_replacement(ExperimentManifest& manifest, PayloadCatalog& catalog,
                           const std::string& id, int step, const TokenStream& holdout,
                           int holdout_step);

}  // namespace pmx
