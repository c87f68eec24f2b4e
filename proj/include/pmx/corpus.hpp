// Copyright (c) 2026 The pmx Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "pmx/common.hpp"

namespace pmx {

// Token alphabet with a reserved block at the front. Reserved ids carry roles
// (separators, triggers, markers, speaker tags) plus a rare pool that the
// procedural generators never emit, so "rare" means frequency exactly zero
// outside deliberate insertions.
class Vocab {
public:
    static Vocab make_default(int size = 512);

    int size() const { return size_; }
    Token role(const std::string& name) const;
    const std::map<std::string, Token>& reserved() const { return reserved_; }
    const std::vector<Token>& rare_pool() const { return rare_pool_; }

    bool is_reserved(Token t) const { return t < reserved_end_; }
    int non_reserved_count() const { return size_ - reserved_end_; }
    Token non_reserved(int rank) const { return static_cast<Token>(reserved_end_ + rank); }

    Token sep() const { return role("sep"); }
    Token qmark() const { return role("qmark"); }
    Token amark() const { return role("amark"); }

private:
    Vocab(int size, int reserved_end, std::map<std::string, Token> reserved,
          std::vector<Token> rare_pool);

    int size_ = 0;
    int reserved_end_ = 0;
    std::map<std::string, Token> reserved_;
    std::vector<Token> rare_pool_;
};

struct StreamDims {
    int n_steps = 0;
    int batch_size = 0;
    int seq_len = 0;

    std::int64_t tokens_per_step() const {
        return static_cast<std::int64_t>(batch_size) * seq_len;
    }
    std::int64_t total_tokens() const { return tokens_per_step() * n_steps; }
    bool operator==(const StreamDims&) const = default;
};

// Read-only view over a (step, slot, pos) token cube. Sequences are the unit
// of generation; batches are filled slot by slot.
class StreamView {
public:
    virtual ~StreamView() = default;
    virtual StreamDims dims() const = 0;
    virtual void fill_sequence(int step, int slot, Token* out) const = 0;

    void fill_batch(int step, Token* out) const;
    std::vector<Token> sequence(int step, int slot) const;
    Token token(int step, int slot, int pos) const;
};

enum class GeneratorId { zipf_ngram };

// Procedurally generated training substrate: a seeded Zipfian bigram chain
// over the non-reserved vocabulary. Every sequence is a pure function of
// (seed, step, slot), so any coordinate can be regenerated independently.
class TokenStream : public StreamView {
public:
    TokenStream(std::uint64_t seed, StreamDims dims, const Vocab& vocab);

    StreamDims dims() const override { return dims_; }
    void fill_sequence(int step, int slot, Token* out) const override;

    std::uint64_t seed() const { return seed_; }
    const Vocab& vocab() const { return vocab_; }
    GeneratorId generator() const { return GeneratorId::zipf_ngram; }

private:
    std::uint64_t seed_;
    StreamDims dims_;
    Vocab vocab_;
    std::vector<double> zipf_cdf_;  // over non-reserved ranks
};

TokenStream gen_base_stream(std::uint64_t seed, int n_steps, int batch_size, int seq_len,
                            const Vocab& vocab);

// Identically distributed stream with a disjoint seed lineage; source of
// validation batches, batch replacements and iid insertions.
TokenStream gen_holdout_stream(std::uint64_t seed, int n_steps, int batch_size, int seq_len,
                               const Vocab& vocab, std::uint64_t base_seed);

struct ProbeQuestion {
    std::vector<Token> prompt;
    std::vector<Token> answer;
};

struct FactEntity {
    std::vector<Token> name;                     // two-token entity name
    std::vector<std::vector<Token>> texts;       // one surface form per paraphrase template
    std::vector<ProbeQuestion> probes;           // exactly four
};

// Synthetic fact universe: entities with attribute/value pairs, K paraphrase
// surface forms each, and four probe questions per entity whose answers are
// the value tokens.
struct FactSet {
    int n_entities = 0;
    int k_paraphrases = 0;
    std::vector<FactEntity> entities;

    // Insertion pool, entity-interleaved so a prefix of any length covers the
    // entities as evenly as possible. Size n_entities * k_paraphrases.
    std::vector<std::vector<Token>> pool() const;
    std::vector<ProbeQuestion> probes() const;
};

FactSet gen_fact_set(std::uint64_t seed, int n_entities, int k_paraphrases, const Vocab& vocab);

struct BenchQuestion {
    std::vector<Token> prompt;                   // question marker + key tokens
    std::array<std::vector<Token>, 4> choices;
    int correct = 0;
    std::string tier;
};

// A family fixes the hidden key->value rule and the key pool; benchmarks
// generated from the same family share both and therefore transfer.
struct BenchmarkFamily {
    std::uint64_t family_seed = 0;
    int key_pool_size = 256;
};

struct Benchmark {
    std::vector<BenchQuestion> questions;

    std::vector<int> tier_indices(const std::string& tier) const;
    std::vector<std::string> tiers() const;
    // Ground-truth text inserted during contamination: prompt, answer marker,
    // correct choice.
    std::vector<Token> contamination_text(int question, const Vocab& vocab) const;
};

// Tier labels of the form "rN" carry the repetition count N; "holdout" is 0.
int tier_repetitions(const std::string& tier);

Benchmark gen_benchmark(std::uint64_t seed, const std::map<std::string, int>& tier_counts,
                        const Vocab& vocab, const BenchmarkFamily& family);
Benchmark gen_benchmark(std::uint64_t seed, const std::map<std::string, int>& tier_counts,
                        const Vocab& vocab);

enum class CanaryKind { none, random_tokens, rare, model_based };

struct CanaryCondition {
    CanaryKind kind = CanaryKind::none;
    int length = 0;       // 0 for the no-canary baselines
    int repetitions = 1;  // times each sample is inserted
    int index = 0;        // position in the grid

    std::string label() const;
};

// Full condition grid: three no-canary baselines plus kinds x lengths x
// repetitions over {random, rare, model_based} x {1, 8, 32} x {1, 4, 16}.
std::vector<CanaryCondition> canary_grid();

// Callback that returns the least likely next token under a reference model
// given a prefix. Required for model_based canaries.
using ArgminNextFn = std::function<Token(const std::vector<Token>&)>;

std::vector<Token> gen_canary(CanaryKind kind, int length, std::uint64_t seed, const Vocab& vocab,
                              const std::vector<Token>& host_prefix,
                              const ArgminNextFn* argmin_next = nullptr);

// Chat-like host dialogue: alternating speaker tags with short utterances.
std::vector<Token> gen_dialogue(std::uint64_t seed, const Vocab& vocab, int n_turns = 3);

// Binary export of a step range: 16-byte header {magic "PMX1", u32 batch_size,
// u32 seq_len, u32 zero-pad}, then little-endian u16 token ids in row-major
// (step, slot, pos) order.
void export_stream(const StreamView& view, int step_begin, int step_end, std::ostream& out);

}  // namespace pmx
