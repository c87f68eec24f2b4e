// Copyright (c) 2026 The pmx Authors
// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "pmx/corpus.hpp"

using namespace pmx;

namespace {

const Vocab& vocab() {
    static Vocab v = Vocab::make_default(512);
    return v;
}

}  // namespace

TEST_CASE("vocab reserves distinct roles and a rare pool") {
    const Vocab& v = vocab();
    CHECK(v.size() == 512);
    CHECK(v.rare_pool().size() == 16);
    std::set<Token> ids;
    for (const auto& [name, id] : v.reserved()) {
        CHECK(id < v.size());
        CHECK(ids.insert(id).second);
    }
    for (Token t : v.rare_pool()) CHECK(v.is_reserved(t));
    CHECK_THROWS_AS(Vocab::make_default(32), ValidationError);
}

TEST_CASE("base stream is deterministic and position seeded") {
    TokenStream a = gen_base_stream(1, 50, 4, 32, vocab());
    TokenStream b = gen_base_stream(1, 50, 4, 32, vocab());
    for (int step : {0, 7, 49}) {
        for (int slot = 0; slot < 4; ++slot) {
            CHECK(a.sequence(step, slot) == b.sequence(step, slot));
        }
    }
    // Access order independence: single token lookup equals batch generation.
    CHECK(a.token(13, 2, 17) == a.sequence(13, 2)[17]);
    CHECK_THROWS_AS(gen_base_stream(1, 0, 4, 32, vocab()), ValidationError);
    CHECK_THROWS_AS(gen_base_stream(1, 10, -1, 32, vocab()), ValidationError);
}

TEST_CASE("different seeds disagree on at least 99 percent of tokens") {
    TokenStream a = gen_base_stream(1, 20, 16, 64, vocab());
    TokenStream b = gen_base_stream(2, 20, 16, 64, vocab());
    int agree = 0, total = 0;
    for (int step = 0; step < 10 && total < 10000; ++step) {
        for (int slot = 0; slot < 16 && total < 10000; ++slot) {
            auto sa = a.sequence(step, slot);
            auto sb = b.sequence(step, slot);
            for (int i = 0; i < 64 && total < 10000; ++i, ++total) {
                if (sa[static_cast<std::size_t>(i)] == sb[static_cast<std::size_t>(i)]) ++agree;
            }
        }
    }
    CHECK(total == 10000);
    CHECK(agree <= 100);
}

TEST_CASE("streams never emit reserved tokens") {
    TokenStream a = gen_base_stream(3, 100, 8, 48, vocab());
    TokenStream h = gen_holdout_stream(4, 100, 8, 48, vocab(), 3);
    for (const TokenStream* s : {&a, &h}) {
        for (int step = 0; step < 100; ++step) {
            for (int slot = 0; slot < 8; ++slot) {
                for (Token t : s->sequence(step, slot)) {
                    REQUIRE(!vocab().is_reserved(t));
                }
            }
        }
    }
}

TEST_CASE("holdout stream validation") {
    CHECK_THROWS_AS(gen_holdout_stream(3, 10, 4, 32, vocab(), 3), ValidationError);
    TokenStream empty = gen_holdout_stream(9, 0, 4, 32, vocab(), 3);
    CHECK(empty.dims().n_steps == 0);
    TokenStream h1 = gen_holdout_stream(7, 10, 4, 32, vocab(), 1);
    TokenStream h2 = gen_holdout_stream(7, 10, 4, 32, vocab(), 1);
    CHECK(h1.sequence(3, 1) == h2.sequence(3, 1));
}

TEST_CASE("holdout and base share no 25 token window") {
    TokenStream base = gen_base_stream(1, 10, 10, 64, vocab());
    TokenStream hold = gen_holdout_stream(7, 10, 10, 64, vocab(), 1);
    std::set<std::vector<Token>> windows;
    int sequences = 0;
    for (int step = 0; step < 10 && sequences < 100; ++step) {
        for (int slot = 0; slot < 10 && sequences < 100; ++slot, ++sequences) {
            auto seq = base.sequence(step, slot);
            for (std::size_t i = 0; i + 25 <= seq.size(); ++i) {
                windows.insert(std::vector<Token>(seq.begin() + i, seq.begin() + i + 25));
            }
        }
    }
    sequences = 0;
    for (int step = 0; step < 10 && sequences < 100; ++step) {
        for (int slot = 0; slot < 10 && sequences < 100; ++slot, ++sequences) {
            auto seq = hold.sequence(step, slot);
            for (std::size_t i = 0; i + 25 <= seq.size(); ++i) {
                CHECK(windows.count(std::vector<Token>(seq.begin() + i, seq.begin() + i + 25)) == 0);
            }
        }
    }
}

TEST_CASE("base and holdout unigram distributions are close, and skewed") {
    const int steps = 1000, batch = 16, seq = 64;  // ~1M tokens each
    TokenStream base = gen_base_stream(11, steps, batch, seq, vocab());
    TokenStream hold = gen_holdout_stream(12, steps, batch, seq, vocab(), 11);
    std::vector<double> fa(512, 0.0), fb(512, 0.0);
    double n = 0;
    for (int step = 0; step < steps; ++step) {
        for (int slot = 0; slot < batch; ++slot) {
            for (Token t : base.sequence(step, slot)) fa[t] += 1;
            for (Token t : hold.sequence(step, slot)) fb[t] += 1;
            n += seq;
        }
    }
    double tv = 0.0;
    for (int i = 0; i < 512; ++i) tv += std::fabs(fa[i] - fb[i]) / n;
    tv /= 2.0;
    CHECK(tv < 0.02);

    // Band masses decrease: the marginal keeps a Zipf-like skew.
    auto band_mass = [&](int lo, int hi) {
        double acc = 0.0;
        for (int r = lo; r < hi; ++r) acc += fa[static_cast<std::size_t>(vocab().non_reserved(r))];
        return acc / n;
    };
    const double m0 = band_mass(0, 128);
    const double m1 = band_mass(128, 256);
    const double m2 = band_mass(256, 384);
    const double m3 = band_mass(384, 480);
    CHECK(m0 > 0.7);
    CHECK(m0 > m1);
    CHECK(m1 > m2);
    CHECK(m2 > m3);
}

TEST_CASE("fact sets have four probes per entity and distinct paraphrases") {
    FactSet fs = gen_fact_set(5, 4, 16, vocab());
    CHECK(fs.entities.size() == 4);
    CHECK(fs.probes().size() == 16);
    for (const auto& e : fs.entities) {
        CHECK(e.probes.size() == 4);
        CHECK(e.texts.size() == 16);
        std::set<std::vector<Token>> distinct(e.texts.begin(), e.texts.end());
        CHECK(distinct.size() == e.texts.size());
        for (const auto& q : e.probes) CHECK(!q.answer.empty());
    }
    CHECK(fs.pool().size() == 64);

    FactSet single = gen_fact_set(5, 2, 1, vocab());
    for (const auto& e : single.entities) CHECK(e.texts.size() == 1);
    CHECK_THROWS_AS(gen_fact_set(5, 0, 1, vocab()), ValidationError);
}

TEST_CASE("benchmark generation respects tiers and balance") {
    std::map<std::string, int> counts = {
        {"holdout", 200}, {"r4", 160}, {"r12", 100}, {"r36", 40}, {"r144", 40}};
    Benchmark b = gen_benchmark(21, counts, vocab());
    CHECK(b.questions.size() == 540);
    for (const auto& [tier, count] : counts) {
        CHECK(b.tier_indices(tier).size() == static_cast<std::size_t>(count));
    }
    CHECK(tier_repetitions("r144") == 144);
    CHECK(tier_repetitions("holdout") == 0);
    CHECK_THROWS_AS(tier_repetitions("weird"), ValidationError);

    // Correct positions cycle, so each position is within 10% of uniform.
    std::map<std::string, std::array<int, 4>> hist;
    for (const auto& q : b.questions) {
        CHECK(q.correct >= 0);
        CHECK(q.correct < 4);
        hist[q.tier][static_cast<std::size_t>(q.correct)] += 1;
    }
    for (const auto& [tier, h] : hist) {
        const double expect = counts[tier] / 4.0;
        for (int c = 0; c < 4; ++c) {
            CHECK(std::fabs(h[static_cast<std::size_t>(c)] - expect) <= 0.1 * expect + 1.0);
        }
    }

    const auto text = b.contamination_text(0, vocab());
    const auto& q0 = b.questions[0];
    CHECK(std::vector<Token>(text.begin(), text.begin() + 4) == q0.prompt);
    CHECK(text[4] == vocab().amark());
}

TEST_CASE("same family benchmarks share keys, different families do not") {
    BenchmarkFamily fam{99, 40};
    std::map<std::string, int> counts = {{"holdout", 60}};
    Benchmark a = gen_benchmark(1, counts, vocab(), fam);
    Benchmark b = gen_benchmark(2, counts, vocab(), fam);
    std::set<std::vector<Token>> prompts_a;
    for (const auto& q : a.questions) prompts_a.insert(q.prompt);
    int shared = 0;
    for (const auto& q : b.questions) shared += prompts_a.count(q.prompt) ? 1 : 0;
    CHECK(shared > 10);
}

TEST_CASE("canary grid covers thirty conditions") {
    auto grid = canary_grid();
    CHECK(grid.size() == 30);
    int none = 0;
    std::set<std::string> labels;
    for (const auto& c : grid) {
        if (c.kind == CanaryKind::none) ++none;
        CHECK(labels.insert(c.label()).second);
    }
    CHECK(none == 3);
}

TEST_CASE("canary generation per kind") {
    std::vector<Token> host = gen_dialogue(17, vocab());
    auto rare = gen_canary(CanaryKind::rare, 8, 3, vocab(), host);
    CHECK(rare.size() == 8);
    std::set<Token> distinct(rare.begin(), rare.end());
    CHECK(distinct.size() == 1);
    const auto& pool = vocab().rare_pool();
    CHECK(std::find(pool.begin(), pool.end(), rare[0]) != pool.end());

    auto r1 = gen_canary(CanaryKind::random_tokens, 1, 5, vocab(), host);
    auto r2 = gen_canary(CanaryKind::random_tokens, 1, 5, vocab(), host);
    CHECK(r1 == r2);
    CHECK(r1.size() == 1);
    CHECK(!vocab().is_reserved(r1[0]));

    CHECK_THROWS_AS(gen_canary(CanaryKind::model_based, 1, 5, vocab(), host), ValidationError);
    ArgminNextFn argmin = [](const std::vector<Token>&) { return Token{77}; };
    auto mb = gen_canary(CanaryKind::model_based, 3, 5, vocab(), host, &argmin);
    CHECK(mb == std::vector<Token>({77, 77, 77}));
}

TEST_CASE("dialogues alternate speakers") {
    auto d = gen_dialogue(8, vocab(), 3);
    CHECK(d[0] == vocab().role("speaker-a"));
    int speaker_tags = 0;
    for (Token t : d) {
        if (t == vocab().role("speaker-a") || t == vocab().role("speaker-b")) ++speaker_tags;
    }
    CHECK(speaker_tags == 3);
}

TEST_CASE("stream export writes header and row major tokens") {
    TokenStream s = gen_base_stream(2, 4, 2, 8, vocab());
    std::ostringstream os(std::ios::binary);
    export_stream(s, 1, 3, os);
    const std::string bytes = os.str();
    REQUIRE(bytes.size() == 16 + 2 * (2 * 8) * 2);  // header + 2 steps of 2x8 u16 tokens
    CHECK(bytes.compare(0, 4, "PMX1") == 0);
    std::uint32_t batch = 0, seq = 0;
    std::memcpy(&batch, bytes.data() + 4, 4);
    std::memcpy(&seq, bytes.data() + 8, 4);
    CHECK(batch == 2);
    CHECK(seq == 8);
    // First exported token is (step=1, slot=0, pos=0), little-endian.
    const Token t0 = s.token(1, 0, 0);
    CHECK(static_cast<unsigned char>(bytes[16]) == (t0 & 0xff));
    CHECK(static_cast<unsigned char>(bytes[17]) == (t0 >> 8));
    CHECK_THROWS_AS(export_stream(s, 3, 5, os), ValidationError);
}
