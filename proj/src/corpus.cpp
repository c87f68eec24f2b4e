// Copyright (c) 2026 The pmx Authors
// SPDX-License-Identifier: Apache-2.0
#include "pmx/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace pmx {

namespace {

constexpr int kReservedEnd = 32;
constexpr int kRarePoolSize = 16;
constexpr double kZipfExponent = 1.1;
// Rotation band for the bigram chain. Wide bands smooth the marginal enough
// that independent seeds collide on well under 1% of coordinates while the
// conditional distribution stays a full Zipf.
constexpr int kBandSize = 128;

// Salt for the bigram transition structure. Shared by every stream so base
// and holdout streams are identically distributed.
constexpr std::uint64_t kTransitionSalt = 0x70616e676f6c696eull;

}  // namespace

Vocab::Vocab(int size, int reserved_end, std::map<std::string, Token> reserved,
             std::vector<Token> rare_pool)
    : size_(size),
      reserved_end_(reserved_end),
      reserved_(std::move(reserved)),
      rare_pool_(std::move(rare_pool)) {}

Vocab Vocab::make_default(int size) {
    if (size < 64) throw ValidationError("vocab size must be at least 64");
    std::map<std::string, Token> roles = {
        {"sep", 0},       {"qmark", 1},     {"amark", 2},
        {"trigger-a", 3}, {"trigger-b", 4}, {"lbrack", 5},
        {"rbrack", 6},    {"speaker-a", 7}, {"speaker-b", 8},
    };
    std::vector<Token> rare;
    for (int i = 0; i < kRarePoolSize; ++i) {
        Token id = static_cast<Token>(kReservedEnd - kRarePoolSize + i);
        rare.push_back(id);
        roles["rare-" + std::to_string(i)] = id;
    }
    std::set<Token> distinct;
    for (const auto& [name, id] : roles) {
        if (id >= size) throw ValidationError("reserved id beyond vocab size: " + name);
        if (!distinct.insert(id).second) throw ValidationError("duplicate reserved id: " + name);
    }
    return Vocab(size, kReservedEnd, std::move(roles), std::move(rare));
}

Token Vocab::role(const std::string& name) const {
    auto it = reserved_.find(name);
    if (it == reserved_.end()) throw ValidationError("unknown vocab role: " + name);
    return it->second;
}

void StreamView::fill_batch(int step, Token* out) const {
    const StreamDims d = dims();
    for (int slot = 0; slot < d.batch_size; ++slot) {
        fill_sequence(step, slot, out + static_cast<std::size_t>(slot) * d.seq_len);
    }
}

std::vector<Token> StreamView::sequence(int step, int slot) const {
    std::vector<Token> seq(static_cast<std::size_t>(dims().seq_len));
    fill_sequence(step, slot, seq.data());
    return seq;
}

Token StreamView::token(int step, int slot, int pos) const {
    std::vector<Token> seq = sequence(step, slot);
    return seq.at(static_cast<std::size_t>(pos));
}

TokenStream::TokenStream(std::uint64_t seed, StreamDims dims, const Vocab& vocab)
    : seed_(seed), dims_(dims), vocab_(vocab) {
    if (dims.n_steps < 0 || dims.batch_size <= 0 || dims.seq_len <= 0) {
        throw ValidationError("token stream dimensions must be positive");
    }
    const int v = vocab_.non_reserved_count();
    zipf_cdf_.resize(static_cast<std::size_t>(v));
    double acc = 0.0;
    for (int r = 0; r < v; ++r) {
        acc += std::pow(static_cast<double>(r + 1), -kZipfExponent);
        zipf_cdf_[static_cast<std::size_t>(r)] = acc;
    }
    for (auto& c : zipf_cdf_) c /= acc;
}

void TokenStream::fill_sequence(int step, int slot, Token* out) const {
    const int v = vocab_.non_reserved_count();
    auto sample_rank = [&](double u) {
        auto it = std::upper_bound(zipf_cdf_.begin(), zipf_cdf_.end(), u);
        int r = static_cast<int>(it - zipf_cdf_.begin());
        return r < v ? r : v - 1;
    };
    for (int pos = 0; pos < dims_.seq_len; ++pos) {
        const std::uint64_t h = mix64(seed_, static_cast<std::uint64_t>(step),
                                      static_cast<std::uint64_t>(slot),
                                      static_cast<std::uint64_t>(pos));
        const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
        int rank = sample_rank(u);
        if (pos > 0) {
            // Bigram structure: rotate the rank within its Zipf band by an
            // amount fixed by the previous token. The rotation is shared by
            // all streams, so it shapes the chain, not the seed lineage.
            const Token prev = out[pos - 1];
            const int band = rank / kBandSize;
            const int start = band * kBandSize;
            const int bsize = std::min(kBandSize, v - start);
            const int rot = static_cast<int>(mix64(kTransitionSalt, prev, static_cast<std::uint64_t>(band)) %
                                             static_cast<std::uint64_t>(bsize));
            rank = start + (rank - start + rot) % bsize;
        }
        out[pos] = vocab_.non_reserved(rank);
    }
}

TokenStream gen_base_stream(std::uint64_t seed, int n_steps, int batch_size, int seq_len,
                            const Vocab& vocab) {
    if (n_steps <= 0 || batch_size <= 0 || seq_len <= 0) {
        throw ValidationError("gen_base_stream: sizes must be positive");
    }
    return TokenStream(seed, StreamDims{n_steps, batch_size, seq_len}, vocab);
}

TokenStream gen_holdout_stream(std::uint64_t seed, int n_steps, int batch_size, int seq_len,
                               const Vocab& vocab, std::uint64_t base_seed) {
    if (seed == base_seed) {
        throw ValidationError("gen_holdout_stream: seed collides with base stream");
    }
    if (n_steps < 0 || batch_size <= 0 || seq_len <= 0) {
        throw ValidationError("gen_holdout_stream: invalid dimensions");
    }
    return TokenStream(seed, StreamDims{n_steps, batch_size, seq_len}, vocab);
}

namespace {

Token draw_non_reserved(Rng& rng, const Vocab& vocab) {
    return vocab.non_reserved(static_cast<int>(rng.uniform_int(
        static_cast<std::uint64_t>(vocab.non_reserved_count()))));
}

}  // namespace

std::vector<std::vector<Token>> FactSet::pool() const {
    std::vector<std::vector<Token>> out;
    out.reserve(static_cast<std::size_t>(n_entities) * k_paraphrases);
    for (int j = 0; j < k_paraphrases; ++j) {
        for (int e = 0; e < n_entities; ++e) {
            out.push_back(entities[static_cast<std::size_t>(e)].texts[static_cast<std::size_t>(j)]);
        }
    }
    return out;
}

std::vector<ProbeQuestion> FactSet::probes() const {
    std::vector<ProbeQuestion> out;
    for (const auto& e : entities) out.insert(out.end(), e.probes.begin(), e.probes.end());
    return out;
}

FactSet gen_fact_set(std::uint64_t seed, int n_entities, int k_paraphrases, const Vocab& vocab) {
    if (n_entities < 1 || k_paraphrases < 1) {
        throw ValidationError("gen_fact_set: n_entities and k_paraphrases must be >= 1");
    }
    Rng rng(mix64(seed, 0x66616374));
    constexpr int kAttributes = 4;

    std::array<Token, kAttributes> attrs{};
    std::set<Token> used;
    for (auto& a : attrs) {
        do {
            a = draw_non_reserved(rng, vocab);
        } while (!used.insert(a).second);
    }

    // Paraphrase templates: three filler tokens each, pairwise distinct as
    // triples so distinct templates give distinct token sequences.
    std::vector<std::array<Token, 3>> fillers;
    std::set<std::array<Token, 3>> seen;
    while (static_cast<int>(fillers.size()) < k_paraphrases) {
        std::array<Token, 3> f = {draw_non_reserved(rng, vocab), draw_non_reserved(rng, vocab),
                                  draw_non_reserved(rng, vocab)};
        if (seen.insert(f).second) fillers.push_back(f);
    }

    FactSet fs;
    fs.n_entities = n_entities;
    fs.k_paraphrases = k_paraphrases;
    for (int e = 0; e < n_entities; ++e) {
        FactEntity ent;
        ent.name = {draw_non_reserved(rng, vocab), draw_non_reserved(rng, vocab)};
        std::array<std::array<Token, 2>, kAttributes> values{};
        for (auto& val : values) val = {draw_non_reserved(rng, vocab), draw_non_reserved(rng, vocab)};

        for (int j = 0; j < k_paraphrases; ++j) {
            const auto& f = fillers[static_cast<std::size_t>(j)];
            std::vector<Token> text;
            for (int a = 0; a < kAttributes; ++a) {
                if (a > 0) text.push_back(vocab.sep());
                text.push_back(f[0]);
                text.push_back(ent.name[0]);
                text.push_back(ent.name[1]);
                text.push_back(f[1]);
                text.push_back(attrs[static_cast<std::size_t>(a)]);
                text.push_back(values[static_cast<std::size_t>(a)][0]);
                text.push_back(values[static_cast<std::size_t>(a)][1]);
                text.push_back(f[2]);
            }
            ent.texts.push_back(std::move(text));
        }
        for (int a = 0; a < kAttributes; ++a) {
            ProbeQuestion q;
            q.prompt = {vocab.qmark(), ent.name[0], ent.name[1], attrs[static_cast<std::size_t>(a)],
                        vocab.amark()};
            q.answer = {values[static_cast<std::size_t>(a)][0], values[static_cast<std::size_t>(a)][1]};
            ent.probes.push_back(std::move(q));
        }
        fs.entities.push_back(std::move(ent));
    }
    return fs;
}

int tier_repetitions(const std::string& tier) {
    if (tier == "holdout") return 0;
    if (tier.size() > 1 && tier[0] == 'r') {
        try {
            return std::stoi(tier.substr(1));
        } catch (const std::exception&) {
        }
    }
    throw ValidationError("unrecognized tier label: " + tier);
}

std::vector<int> Benchmark::tier_indices(const std::string& tier) const {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(questions.size()); ++i) {
        if (questions[static_cast<std::size_t>(i)].tier == tier) out.push_back(i);
    }
    return out;
}

std::vector<std::string> Benchmark::tiers() const {
    std::vector<std::string> out;
    for (const auto& q : questions) {
        if (std::find(out.begin(), out.end(), q.tier) == out.end()) out.push_back(q.tier);
    }
    return out;
}

std::vector<Token> Benchmark::contamination_text(int question, const Vocab& vocab) const {
    const auto& q = questions.at(static_cast<std::size_t>(question));
    std::vector<Token> text = q.prompt;
    text.push_back(vocab.amark());
    const auto& correct = q.choices[static_cast<std::size_t>(q.correct)];
    text.insert(text.end(), correct.begin(), correct.end());
    return text;
}

namespace {

// Hidden rule of a benchmark family: the value tokens are a keyed hash of the
// key tokens, so they are learnable only through exposure.
std::array<Token, 2> family_value(std::uint64_t family_seed, const std::array<Token, 3>& key,
                                  const Vocab& vocab) {
    const std::uint64_t h = mix64(family_seed, key[0], key[1], key[2]);
    const int v = vocab.non_reserved_count();
    return {vocab.non_reserved(static_cast<int>(h % static_cast<std::uint64_t>(v))),
            vocab.non_reserved(static_cast<int>((h >> 20) % static_cast<std::uint64_t>(v)))};
}

}  // namespace

Benchmark gen_benchmark(std::uint64_t seed, const std::map<std::string, int>& tier_counts,
                        const Vocab& vocab, const BenchmarkFamily& family) {
    for (const auto& [tier, count] : tier_counts) {
        tier_repetitions(tier);
        if (count < 1) throw ValidationError("gen_benchmark: tier count must be >= 1: " + tier);
    }
    Rng key_rng(mix64(family.family_seed, 0x6b657973));
    std::vector<std::array<Token, 3>> key_pool;
    std::set<std::array<Token, 3>> key_seen;
    while (static_cast<int>(key_pool.size()) < family.key_pool_size) {
        std::array<Token, 3> k = {draw_non_reserved(key_rng, vocab),
                                  draw_non_reserved(key_rng, vocab),
                                  draw_non_reserved(key_rng, vocab)};
        if (key_seen.insert(k).second) key_pool.push_back(k);
    }

    Rng rng(mix64(seed, 0x62656e6368));
    Benchmark bench;
    int qi = 0;
    for (const auto& [tier, count] : tier_counts) {
        for (int i = 0; i < count; ++i, ++qi) {
            const auto& key = key_pool[rng.uniform_int(key_pool.size())];
            BenchQuestion q;
            q.tier = tier;
            q.prompt = {vocab.qmark(), key[0], key[1], key[2]};
            const std::array<Token, 2> correct = family_value(family.family_seed, key, vocab);
            q.correct = qi % 4;
            for (int c = 0; c < 4; ++c) {
                if (c == q.correct) {
                    q.choices[static_cast<std::size_t>(c)] = {correct[0], correct[1]};
                    continue;
                }
                // Distractors are values of other keys: same marginal
                // distribution, different association.
                std::array<Token, 2> alt = correct;
                while (alt == correct) {
                    const auto& other = key_pool[rng.uniform_int(key_pool.size())];
                    alt = family_value(family.family_seed, other, vocab);
                    if (alt == correct) {
                        alt = {draw_non_reserved(rng, vocab), draw_non_reserved(rng, vocab)};
                    }
                }
                q.choices[static_cast<std::size_t>(c)] = {alt[0], alt[1]};
            }
            bench.questions.push_back(std::move(q));
        }
    }
    return bench;
}

Benchmark gen_benchmark(std::uint64_t seed, const std::map<std::string, int>& tier_counts,
                        const Vocab& vocab) {
    return gen_benchmark(seed, tier_counts, vocab, BenchmarkFamily{mix64(seed, 0x66616d), 256});
}

std::string CanaryCondition::label() const {
    std::string k;
    switch (kind) {
        case CanaryKind::none: k = "none"; break;
        case CanaryKind::random_tokens: k = "random"; break;
        case CanaryKind::rare: k = "rare"; break;
        case CanaryKind::model_based: k = "model"; break;
    }
    return k + "_len" + std::to_string(length) + "_rep" + std::to_string(repetitions);
}

std::vector<CanaryCondition> canary_grid() {
    std::vector<CanaryCondition> grid;
    int idx = 0;
    for (int rep : {1, 4, 16}) {
        grid.push_back({CanaryKind::none, 0, rep, idx++});
    }
    for (CanaryKind kind : {CanaryKind::rare, CanaryKind::model_based, CanaryKind::random_tokens}) {
        for (int len : {1, 8, 32}) {
            for (int rep : {1, 4, 16}) {
                grid.push_back({kind, len, rep, idx++});
            }
        }
    }
    return grid;
}

std::vector<Token> gen_canary(CanaryKind kind, int length, std::uint64_t seed, const Vocab& vocab,
                              const std::vector<Token>& host_prefix,
                              const ArgminNextFn* argmin_next) {
    if (length < 0) throw ValidationError("gen_canary: negative length");
    std::vector<Token> canary;
    Rng rng(mix64(seed, 0x63616e617279));
    switch (kind) {
        case CanaryKind::none:
            break;
        case CanaryKind::random_tokens:
            for (int i = 0; i < length; ++i) canary.push_back(draw_non_reserved(rng, vocab));
            break;
        case CanaryKind::rare: {
            const auto& pool = vocab.rare_pool();
            const Token t = pool[rng.uniform_int(pool.size())];
            canary.assign(static_cast<std::size_t>(length), t);
            break;
        }
        case CanaryKind::model_based: {
            if (argmin_next == nullptr || !*argmin_next) {
                throw ValidationError("gen_canary: model_based kind requires a reference model");
            }
            std::vector<Token> ctx = host_prefix;
            for (int i = 0; i < length; ++i) {
                const Token t = (*argmin_next)(ctx);
                canary.push_back(t);
                ctx.push_back(t);
            }
            break;
        }
    }
    return canary;
}

std::vector<Token> gen_dialogue(std::uint64_t seed, const Vocab& vocab, int n_turns) {
    Rng rng(mix64(seed, 0x6469616c6f67ull));
    std::vector<Token> out;
    const Token speakers[2] = {vocab.role("speaker-a"), vocab.role("speaker-b")};
    for (int t = 0; t < n_turns; ++t) {
        out.push_back(speakers[t % 2]);
        const int words = 4 + static_cast<int>(rng.uniform_int(3));
        for (int w = 0; w < words; ++w) out.push_back(draw_non_reserved(rng, vocab));
    }
    return out;
}

void export_stream(const StreamView& view, int step_begin, int step_end, std::ostream& out) {
    const StreamDims d = view.dims();
    if (step_begin < 0 || step_end > d.n_steps || step_begin > step_end) {
        throw ValidationError("export_stream: step range out of bounds");
    }
    char header[16] = {'P', 'M', 'X', '1'};
    const std::uint32_t batch = static_cast<std::uint32_t>(d.batch_size);
    const std::uint32_t seq = static_cast<std::uint32_t>(d.seq_len);
    std::memcpy(header + 4, &batch, 4);
    std::memcpy(header + 8, &seq, 4);
    out.write(header, sizeof(header));

    std::vector<Token> batch_buf(static_cast<std::size_t>(d.tokens_per_step()));
    std::vector<unsigned char> bytes(batch_buf.size() * 2);
    for (int step = step_begin; step < step_end; ++step) {
        view.fill_batch(step, batch_buf.data());
        for (std::size_t i = 0; i < batch_buf.size(); ++i) {
            bytes[2 * i] = static_cast<unsigned char>(batch_buf[i] & 0xff);
            bytes[2 * i + 1] = static_cast<unsigned char>(batch_buf[i] >> 8);
        }
        out.write(reinterpret_cast<const char*>(bytes.data()),
                  static_cast<std::streamsize>(bytes.size()));
    }
}

}  // namespace pmx
