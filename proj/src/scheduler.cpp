// Copyright (c) 2026 The pmx Authors
// SPDX-License-Identifier: Apache-2.0
#include "pmx/scheduler.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace pmx {

using nlohmann::json;

namespace {

constexpr double kMaxBudgetFraction = 0.20;
constexpr int kPlacementAttempts = 400;
constexpr std::uint32_t kDynamicBit = 1u << 30;

std::uint64_t slot_key(int step, int slot) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(step)) << 16) |
           static_cast<std::uint32_t>(slot);
}

}  // namespace

std::string to_string(ExperimentKind kind) {
    switch (kind) {
        case ExperimentKind::insert_uniform: return "insert_uniform";
        case ExperimentKind::insert_window: return "insert_window";
        case ExperimentKind::repeat_tiered: return "repeat_tiered";
        case ExperimentKind::replace_batch: return "replace_batch";
        case ExperimentKind::duplicate_split: return "duplicate_split";
        case ExperimentKind::dynamic_hook: return "dynamic_hook";
        case ExperimentKind::embed_noise: return "embed_noise";
    }
    return "?";
}

std::string to_string(TokenClass cls) {
    switch (cls) {
        case TokenClass::iid: return "iid";
        case TokenClass::ood: return "ood";
        case TokenClass::unusual: return "unusual";
    }
    return "?";
}

ExperimentKind experiment_kind_from_string(const std::string& s) {
    for (ExperimentKind k :
         {ExperimentKind::insert_uniform, ExperimentKind::insert_window, ExperimentKind::repeat_tiered,
          ExperimentKind::replace_batch, ExperimentKind::duplicate_split, ExperimentKind::dynamic_hook,
          ExperimentKind::embed_noise}) {
        if (to_string(k) == s) return k;
    }
    throw ValidationError("unknown experiment kind: " + s);
}

TokenClass token_class_from_string(const std::string& s) {
    for (TokenClass c : {TokenClass::iid, TokenClass::ood, TokenClass::unusual}) {
        if (to_string(c) == s) return c;
    }
    throw ValidationError("unknown token class: " + s);
}

std::int64_t Experiment::resolve_budget(std::int64_t stream_tokens) const {
    if (budget_tokens > 0) return budget_tokens;
    if (budget_fraction > 0.0) {
        return static_cast<std::int64_t>(budget_fraction * static_cast<double>(stream_tokens) + 0.5);
    }
    return 0;
}

std::pair<int, int> Experiment::resolve_window(int n_steps) const {
    const int end = window_end < 0 ? n_steps : window_end;
    return {window_begin, end};
}

void ExperimentManifest::validate(const StreamDims& dims) const {
    std::set<std::string> ids;
    std::int64_t aggregate = 0;
    for (const auto& e : experiments) {
        if (e.id.empty()) throw ValidationError("experiment with empty id");
        if (!ids.insert(e.id).second) throw ValidationError("duplicate experiment id: " + e.id);
        if (e.budget_tokens < 0) throw ValidationError("negative budget in " + e.id);
        if (e.budget_fraction < 0.0 || e.budget_fraction >= 1.0) {
            throw ValidationError("budget fraction outside (0,1) in " + e.id);
        }
        auto [wb, we] = e.resolve_window(dims.n_steps);
        if (wb < 0 || we > dims.n_steps || wb >= we) {
            throw ValidationError("window out of range in " + e.id);
        }
        for (int r : e.repetitions) {
            if (r < 1) throw ValidationError("repetitions must be positive in " + e.id);
        }
        aggregate += e.resolve_budget(dims.total_tokens());
    }
    if (static_cast<double>(aggregate) >
        kMaxBudgetFraction * static_cast<double>(dims.total_tokens())) {
        throw ValidationError("aggregate budget exceeds 20% of the stream");
    }
}

std::string ExperimentManifest::to_json() const {
    json j;
    j["seed"] = seed;
    j["experiments"] = json::array();
    for (const auto& e : experiments) {
        json je;
        je["id"] = e.id;
        je["kind"] = to_string(e.kind);
        if (e.budget_tokens > 0) je["budget"] = {{"tokens", e.budget_tokens}};
        else if (e.budget_fraction > 0.0) je["budget"] = {{"fraction", e.budget_fraction}};
        je["window"] = {e.window_begin, e.window_end};
        je["repetitions"] = e.repetitions;
        je["payload_source"] = e.payload_source;
        je["seed"] = e.seed;
        je["class"] = to_string(e.token_class);
        if (!e.params.empty()) je["params"] = e.params;
        j["experiments"].push_back(std::move(je));
    }
    return j.dump(2);
}

ExperimentManifest ExperimentManifest::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& err) {
        throw ValidationError(std::string("manifest parse error: ") + err.what());
    }
    ExperimentManifest m;
    try {
        m.seed = j.value("seed", 0ull);
        for (const auto& je : j.at("experiments")) {
            Experiment e;
            e.id = je.at("id").get<std::string>();
            e.kind = experiment_kind_from_string(je.at("kind").get<std::string>());
            if (je.contains("budget")) {
                const auto& b = je["budget"];
                if (b.contains("tokens")) e.budget_tokens = b["tokens"].get<std::int64_t>();
                if (b.contains("fraction")) e.budget_fraction = b["fraction"].get<double>();
            }
            if (je.contains("window")) {
                e.window_begin = je["window"][0].get<int>();
                e.window_end = je["window"][1].get<int>();
            }
            if (je.contains("repetitions")) e.repetitions = je["repetitions"].get<std::vector<int>>();
            e.payload_source = je.value("payload_source", std::string());
            e.seed = je.value("seed", 0ull);
            e.token_class = token_class_from_string(je.value("class", std::string("ood")));
            if (je.contains("params")) {
                e.params = je["params"].get<std::map<std::string, double>>();
            }
            m.experiments.push_back(std::move(e));
        }
    } catch (const json::exception& err) {
        throw ValidationError(std::string("manifest field error: ") + err.what());
    }
    return m;
}

std::int64_t InterventionLedger::total_tokens() const {
    std::int64_t acc = 0;
    for (const auto& e : entries) acc += e.length;
    return acc;
}

std::int64_t InterventionLedger::total_identical() const {
    std::int64_t acc = 0;
    for (const auto& e : entries) acc += e.identical;
    return acc;
}

std::map<std::string, std::int64_t> InterventionLedger::per_experiment_tokens() const {
    std::map<std::string, std::int64_t> out;
    for (const auto& e : entries) out[e.experiment_id] += e.length;
    return out;
}

std::string InterventionLedger::to_csv() const {
    std::ostringstream os;
    os << "experiment_id,step,slot,offset,length,class,payload_id\n";
    for (const auto& e : entries) {
        os << e.experiment_id << ',' << e.step << ',' << e.slot << ',' << e.offset << ','
           << e.length << ',' << to_string(e.cls) << ',' << e.payload << '\n';
    }
    return os.str();
}

std::vector<AccountingRow> accounting(const InterventionLedger& ledger, const StreamDims& dims) {
    std::map<std::string, AccountingRow> rows;
    for (const auto& e : ledger.entries) {
        auto& row = rows[e.experiment_id];
        row.experiment_id = e.experiment_id;
        row.tokens += e.length;
        row.cls = e.cls;
    }
    std::vector<AccountingRow> out;
    const double total = static_cast<double>(dims.total_tokens());
    for (auto& [id, row] : rows) {
        row.fraction = total > 0.0 ? static_cast<double>(row.tokens) / total : 0.0;
        out.push_back(row);
    }
    return out;
}

std::uint64_t stream_identity(const TokenStream& stream) {
    const StreamDims d = stream.dims();
    std::uint64_t h = mix64(stream.seed(), static_cast<std::uint64_t>(d.n_steps),
                            static_cast<std::uint64_t>(d.batch_size),
                            static_cast<std::uint64_t>(d.seq_len));
    return mix64(h, static_cast<std::uint64_t>(stream.vocab().size()));
}

namespace {

// Occupied intervals per (step, slot) during compilation.
class Occupancy {
public:
    bool try_claim(int step, int slot, int offset, int length) {
        auto& spans = spans_[slot_key(step, slot)];
        for (const auto& [o, l] : spans) {
            if (offset < o + l && o < offset + length) return false;
        }
        spans.emplace_back(offset, length);
        return true;
    }

private:
    std::unordered_map<std::uint64_t, std::vector<std::pair<int, int>>> spans_;
};

bool contains_subsequence(const std::vector<Token>& haystack, const std::vector<Token>& needle) {
    if (needle.empty() || haystack.size() < needle.size()) return false;
    return std::search(haystack.begin(), haystack.end(), needle.begin(), needle.end()) !=
           haystack.end();
}

struct Compiler {
    const ExperimentManifest& manifest;
    const TokenStream& stream;
    const std::vector<std::vector<Token>>& forbidden;
    const PayloadCatalog& catalog;
    const CompileOptions& options;

    StreamDims dims;
    Occupancy occupancy;
    Schedule schedule;
    InterventionLedger ledger;
    std::vector<Token> scratch;

    std::uint32_t add_payload(std::vector<Token> tokens) {
        schedule.payloads.push_back(std::move(tokens));
        return static_cast<std::uint32_t>(schedule.payloads.size() - 1);
    }

    int identical_count(int step, int slot, int offset, const std::vector<Token>& payload) {
        scratch.resize(static_cast<std::size_t>(dims.seq_len));
        stream.fill_sequence(step, slot, scratch.data());
        int same = 0;
        for (std::size_t i = 0; i < payload.size(); ++i) {
            if (scratch[static_cast<std::size_t>(offset) + i] == payload[i]) ++same;
        }
        return same;
    }

    void place_uniform(int exp_index, const std::string& id, TokenClass cls,
                       const std::vector<Token>& piece, int wb, int we, Rng& rng) {
        const int max_offset = dims.seq_len - static_cast<int>(piece.size());
        if (piece.empty() || max_offset < 0) {
            throw ValidationError("payload does not fit a sequence in " + id);
        }
        for (int attempt = 0; attempt < kPlacementAttempts; ++attempt) {
            const int step = wb + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(we - wb)));
            const int slot = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(dims.batch_size)));
            const int offset = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(max_offset + 1)));
            if (!occupancy.try_claim(step, slot, offset, static_cast<int>(piece.size()))) continue;
            const std::uint32_t pid = add_payload(piece);
            schedule.placements.push_back(
                {exp_index, step, slot, offset, static_cast<int>(piece.size()), pid});
            ledger.entries.push_back({id, step, slot, offset, static_cast<int>(piece.size()), cls, pid,
                                      identical_count(step, slot, offset, piece)});
            return;
        }
        throw CapacityError("cannot place payload without overlap for experiment " + id);
    }

    // Splits an item into sequence-sized chunks, placing each independently.
    void place_item(int exp_index, const std::string& id, TokenClass cls,
                    const std::vector<Token>& item, int wb, int we, Rng& rng) {
        const std::size_t cap = static_cast<std::size_t>(dims.seq_len);
        for (std::size_t at = 0; at < item.size(); at += cap) {
            const std::size_t len = std::min(cap, item.size() - at);
            std::vector<Token> piece(item.begin() + static_cast<std::ptrdiff_t>(at),
                                     item.begin() + static_cast<std::ptrdiff_t>(at + len));
            place_uniform(exp_index, id, cls, piece, wb, we, rng);
        }
    }

    const std::vector<PayloadItem>& items_for(const Experiment& e) {
        auto it = catalog.find(e.id);
        if (it == catalog.end()) {
            throw ValidationError("no payload catalog entry for experiment " + e.id);
        }
        return it->second;
    }

    void check_forbidden_payload(const Experiment& e, const std::vector<Token>& item) {
        for (const auto& f : forbidden) {
            if (contains_subsequence(item, f)) {
                throw ValidationError("exclusion violation: payload of experiment " + e.id +
                                      " contains a forbidden sequence");
            }
        }
    }

    void repair_base_stream() {
        if (forbidden.empty()) return;
        const auto violations = scan_exclude(stream, forbidden);
        if (violations.empty()) return;
        if (options.exclusion_source == nullptr) {
            throw ValidationError("forbidden sequences occur in the base stream and no exclusion source was given");
        }
        std::set<std::pair<int, int>> sequences;
        for (const auto& v : violations) sequences.insert({v.step, v.slot});
        const StreamDims src_dims = options.exclusion_source->dims();
        if (src_dims.seq_len != dims.seq_len) {
            throw ValidationError("exclusion source sequence length mismatch");
        }
        int cursor = 0;
        for (const auto& [step, slot] : sequences) {
            std::vector<Token> replacement;
            for (;; ++cursor) {
                const int src_step = cursor / src_dims.batch_size;
                const int src_slot = cursor % src_dims.batch_size;
                if (src_step >= src_dims.n_steps) {
                    throw CapacityError("exclusion source exhausted while repairing base stream");
                }
                replacement = options.exclusion_source->sequence(src_step, src_slot);
                bool clean = true;
                for (const auto& f : forbidden) {
                    if (contains_subsequence(replacement, f)) { clean = false; break; }
                }
                if (clean) { ++cursor; break; }
            }
            if (!occupancy.try_claim(step, slot, 0, dims.seq_len)) {
                throw CapacityError("exclusion repair overlaps an existing placement");
            }
            const std::uint32_t pid = add_payload(replacement);
            schedule.placements.push_back({-1, step, slot, 0, dims.seq_len, pid});
            ledger.entries.push_back({"__exclusion", step, slot, 0, dims.seq_len, TokenClass::iid, pid,
                                      identical_count(step, slot, 0, replacement)});
        }
    }

    void compile_experiment(int exp_index) {
        const Experiment& e = manifest.experiments[static_cast<std::size_t>(exp_index)];
        auto [wb, we] = e.resolve_window(dims.n_steps);
        Rng rng(mix64(e.seed, 0x706c616365));
        std::int64_t placed = 0;
        const std::size_t ledger_mark = ledger.entries.size();

        switch (e.kind) {
            case ExperimentKind::insert_uniform:
            case ExperimentKind::insert_window: {
                for (const auto& item : items_for(e)) {
                    check_forbidden_payload(e, item.tokens);
                    place_item(exp_index, e.id, e.token_class, item.tokens, wb, we, rng);
                }
                break;
            }
            case ExperimentKind::repeat_tiered: {
                for (const auto& item : items_for(e)) {
                    check_forbidden_payload(e, item.tokens);
                    for (int r = 0; r < item.repetitions; ++r) {
                        place_item(exp_index, e.id, e.token_class, item.tokens, wb, we, rng);
                    }
                }
                break;
            }
            case ExperimentKind::duplicate_split: {
                const auto& items = items_for(e);
                auto cond_it = e.params.find("condition");
                if (items.empty() || cond_it == e.params.end()) {
                    throw ValidationError("duplicate_split requires one article and a condition param in " + e.id);
                }
                const int condition = static_cast<int>(cond_it->second);
                for (const auto& item : items) {
                    check_forbidden_payload(e, item.tokens);
                    for (const auto& piece : duplicate_split(item.tokens, condition, rng)) {
                        place_item(exp_index, e.id, e.token_class, piece, wb, we, rng);
                    }
                }
                break;
            }
            case ExperimentKind::replace_batch: {
                const auto& items = items_for(e);
                if (static_cast<int>(items.size()) != dims.batch_size) {
                    throw ValidationError("replace_batch needs exactly batch_size sequences in " + e.id);
                }
                const int step = wb;
                if (step < 0 || step >= dims.n_steps) {
                    throw ValidationError("replace_batch step out of range in " + e.id);
                }
                int identical = 0;
                for (int slot = 0; slot < dims.batch_size; ++slot) {
                    const auto& tokens = items[static_cast<std::size_t>(slot)].tokens;
                    if (static_cast<int>(tokens.size()) != dims.seq_len) {
                        throw ValidationError("replace_batch sequence length mismatch in " + e.id);
                    }
                    check_forbidden_payload(e, tokens);
                    if (!occupancy.try_claim(step, slot, 0, dims.seq_len)) {
                        throw CapacityError("replace_batch overlaps existing placement in " + e.id);
                    }
                    const std::uint32_t pid = add_payload(tokens);
                    schedule.placements.push_back({exp_index, step, slot, 0, dims.seq_len, pid});
                    identical += identical_count(step, slot, 0, tokens);
                }
                ledger.entries.push_back({e.id, step, -1, 0,
                                          dims.batch_size * dims.seq_len, e.token_class,
                                          static_cast<std::uint32_t>(schedule.payloads.size() - 1),
                                          identical});
                break;
            }
            case ExperimentKind::dynamic_hook:
                break;
            case ExperimentKind::embed_noise: {
                const int interval = e.params.count("interval")
                                         ? static_cast<int>(e.params.at("interval"))
                                         : std::max(1, dims.n_steps / 100);
                const int per_event = e.params.count("slots_per_event")
                                          ? static_cast<int>(e.params.at("slots_per_event"))
                                          : 8;
                const double sigma = e.params.count("sigma") ? e.params.at("sigma") : 0.075;
                if (sigma <= 0.0) throw ValidationError("embed_noise sigma must be positive in " + e.id);
                if (per_event < 1 || per_event > dims.batch_size) {
                    throw ValidationError("embed_noise slots_per_event out of range in " + e.id);
                }
                int event = 0;
                for (int step = wb + interval - 1; step < we; step += interval, ++event) {
                    // Seeded sample of distinct slots for this event.
                    std::vector<int> slots(static_cast<std::size_t>(dims.batch_size));
                    for (int i = 0; i < dims.batch_size; ++i) slots[static_cast<std::size_t>(i)] = i;
                    for (int i = 0; i < per_event; ++i) {
                        const int j = i + static_cast<int>(rng.uniform_int(
                                              static_cast<std::uint64_t>(dims.batch_size - i)));
                        std::swap(slots[static_cast<std::size_t>(i)], slots[static_cast<std::size_t>(j)]);
                    }
                    slots.resize(static_cast<std::size_t>(per_event));
                    std::sort(slots.begin(), slots.end());
                    for (int slot : slots) {
                        schedule.noise.push_back(
                            {exp_index, step, slot, mix64(e.seed, static_cast<std::uint64_t>(step),
                                                          static_cast<std::uint64_t>(slot)),
                             sigma});
                        ledger.entries.push_back({e.id, step, slot, 0, dims.seq_len, e.token_class,
                                                  static_cast<std::uint32_t>(event), dims.seq_len});
                    }
                }
                break;
            }
        }

        for (std::size_t i = ledger_mark; i < ledger.entries.size(); ++i) {
            placed += ledger.entries[i].length;
        }
        const std::int64_t declared = e.resolve_budget(dims.total_tokens());
        if (declared > 0 && e.kind != ExperimentKind::dynamic_hook && placed != declared) {
            throw ValidationError("experiment " + e.id + " placed " + std::to_string(placed) +
                                  " tokens but declares a budget of " + std::to_string(declared));
        }
    }

    CompileResult run() {
        dims = stream.dims();
        manifest.validate(dims);
        for (const auto& f : forbidden) {
            if (f.size() < 8) throw ValidationError("forbidden sequences must have length >= 8");
        }
        schedule.stream_identity = stream_identity(stream);
        schedule.dims = dims;
        repair_base_stream();
        for (int i = 0; i < static_cast<int>(manifest.experiments.size()); ++i) {
            compile_experiment(i);
        }
        std::sort(schedule.placements.begin(), schedule.placements.end(),
                  [](const Placement& a, const Placement& b) {
                      return std::tie(a.step, a.slot, a.offset) < std::tie(b.step, b.slot, b.offset);
                  });
        return {std::move(schedule), std::move(ledger)};
    }
};

}  // namespace

CompileResult compile(const ExperimentManifest& manifest, const TokenStream& stream,
                      const std::vector<std::vector<Token>>& forbidden,
                      const PayloadCatalog& catalog, const CompileOptions& options) {
    Compiler c{manifest, stream, forbidden, catalog, options, {}, {}, {}, {}, {}};
    return c.run();
}

std::vector<std::vector<Token>> duplicate_split(const std::vector<Token>& article, int condition,
                                                Rng& rng) {
    if (condition < 1 || condition > 9) throw ValidationError("duplicate_split: condition must be in [1,9]");
    constexpr int kParts = 7;
    if (static_cast<int>(article.size()) < kParts) {
        throw ValidationError("duplicate_split: article too short to split into 7 parts");
    }
    const int copies[3] = {1, 10, 100};

    auto split7 = [&]() {
        // Six distinct interior cut points; every part nonempty.
        std::set<std::size_t> cuts;
        while (cuts.size() < kParts - 1) {
            cuts.insert(1 + rng.uniform_int(article.size() - 1));
        }
        std::vector<std::vector<Token>> parts;
        std::size_t prev = 0;
        for (std::size_t cut : cuts) {
            parts.emplace_back(article.begin() + static_cast<std::ptrdiff_t>(prev),
                               article.begin() + static_cast<std::ptrdiff_t>(cut));
            prev = cut;
        }
        parts.emplace_back(article.begin() + static_cast<std::ptrdiff_t>(prev), article.end());
        return parts;
    };

    std::vector<std::vector<Token>> out;
    if (condition <= 3) {
        const int n = copies[condition - 1];
        for (int i = 0; i < n; ++i) out.push_back(article);
    } else if (condition <= 6) {
        const int n = copies[condition - 4];
        const auto parts = split7();
        for (int i = 0; i < n; ++i) out.insert(out.end(), parts.begin(), parts.end());
    } else {
        const int n = copies[condition - 7];
        for (int i = 0; i < n; ++i) {
            const auto parts = split7();
            out.insert(out.end(), parts.begin(), parts.end());
        }
    }
    return out;
}

std::vector<Violation> scan_exclude(const StreamView& view,
                                    const std::vector<std::vector<Token>>& forbidden) {
    return scan_exclude(view, forbidden, 0, view.dims().n_steps);
}

std::vector<Violation> scan_exclude(const StreamView& view,
                                    const std::vector<std::vector<Token>>& forbidden,
                                    int step_begin, int step_end) {
    constexpr std::size_t kKeyLen = 8;
    for (const auto& f : forbidden) {
        if (f.size() < kKeyLen) throw ValidationError("scan_exclude: forbidden sequences must have length >= 8");
    }
    std::vector<Violation> out;
    if (forbidden.empty()) return out;

    std::unordered_map<std::uint64_t, std::vector<int>> heads;
    for (int fi = 0; fi < static_cast<int>(forbidden.size()); ++fi) {
        std::uint64_t h = kFnvOffsetBasis;
        for (std::size_t i = 0; i < kKeyLen; ++i) h = fnv1a_token(h, forbidden[static_cast<std::size_t>(fi)][i]);
        heads[h].push_back(fi);
    }

    const StreamDims d = view.dims();
    std::vector<Token> seq(static_cast<std::size_t>(d.seq_len));
    for (int step = step_begin; step < step_end; ++step) {
        for (int slot = 0; slot < d.batch_size; ++slot) {
            view.fill_sequence(step, slot, seq.data());
            const int last_start = d.seq_len - static_cast<int>(kKeyLen);
            for (int off = 0; off <= last_start; ++off) {
                std::uint64_t h = kFnvOffsetBasis;
                for (std::size_t i = 0; i < kKeyLen; ++i) {
                    h = fnv1a_token(h, seq[static_cast<std::size_t>(off) + i]);
                }
                auto it = heads.find(h);
                if (it == heads.end()) continue;
                for (int fi : it->second) {
                    const auto& f = forbidden[static_cast<std::size_t>(fi)];
                    if (off + static_cast<int>(f.size()) > d.seq_len) continue;
                    if (std::equal(f.begin(), f.end(), seq.begin() + off)) {
                        out.push_back({step, slot, off, fi});
                    }
                }
            }
        }
    }
    return out;
}

std::uint64_t stream_hash(const StreamView& view, int step_begin, int step_end) {
    const StreamDims d = view.dims();
    if (step_begin < 0 || step_end > d.n_steps || step_begin > step_end) {
        throw ValidationError("stream_hash: step range out of bounds");
    }
    std::uint64_t h = kFnvOffsetBasis;
    std::vector<Token> seq(static_cast<std::size_t>(d.seq_len));
    for (int step = step_begin; step < step_end; ++step) {
        for (int slot = 0; slot < d.batch_size; ++slot) {
            view.fill_sequence(step, slot, seq.data());
            for (Token t : seq) h = fnv1a_token(h, t);
        }
    }
    return h;
}

std::uint64_t stream_hash(const StreamView& view) { return stream_hash(view, 0, view.dims().n_steps); }

std::uint64_t stream_hash_excluding(const StreamView& view, int step_begin, int step_end,
                                    const std::vector<Placement>& skip) {
    const StreamDims d = view.dims();
    std::unordered_map<std::uint64_t, std::vector<std::pair<int, int>>> mask;
    for (const auto& p : skip) mask[slot_key(p.step, p.slot)].emplace_back(p.offset, p.length);

    std::uint64_t h = kFnvOffsetBasis;
    std::vector<Token> seq(static_cast<std::size_t>(d.seq_len));
    std::vector<bool> skip_pos(static_cast<std::size_t>(d.seq_len));
    for (int step = step_begin; step < step_end; ++step) {
        for (int slot = 0; slot < d.batch_size; ++slot) {
            view.fill_sequence(step, slot, seq.data());
            std::fill(skip_pos.begin(), skip_pos.end(), false);
            auto it = mask.find(slot_key(step, slot));
            if (it != mask.end()) {
                for (const auto& [o, l] : it->second) {
                    for (int i = o; i < o + l && i < d.seq_len; ++i) skip_pos[static_cast<std::size_t>(i)] = true;
                }
            }
            for (int i = 0; i < d.seq_len; ++i) {
                if (!skip_pos[static_cast<std::size_t>(i)]) h = fnv1a_token(h, seq[static_cast<std::size_t>(i)]);
            }
        }
    }
    return h;
}

TrainingStream::TrainingStream(const TokenStream& base, const Schedule& schedule)
    : base_(&base), schedule_(&schedule) {
    if (schedule.stream_identity != stream_identity(base)) {
        throw ValidationError("schedule was compiled against a different stream");
    }
    for (std::uint32_t i = 0; i < schedule_->placements.size(); ++i) {
        index_placement(schedule_->placements[i], false);
    }
}

void TrainingStream::index_placement(const Placement& p, bool dynamic) {
    const std::uint32_t idx = dynamic ? (static_cast<std::uint32_t>(dyn_placements_.size() - 1) | kDynamicBit)
                                      : static_cast<std::uint32_t>(&p - schedule_->placements.data());
    index_[slot_key(p.step, p.slot)].push_back(idx);
}

bool TrainingStream::range_free(int step, int slot, int offset, int length) const {
    auto it = index_.find(slot_key(step, slot));
    if (it == index_.end()) return true;
    for (std::uint32_t idx : it->second) {
        const Placement& p = (idx & kDynamicBit) ? dyn_placements_[idx & ~kDynamicBit]
                                                 : schedule_->placements[idx];
        if (offset < p.offset + p.length && p.offset < offset + length) return false;
    }
    return true;
}

void TrainingStream::fill_sequence(int step, int slot, Token* out) const {
    base_->fill_sequence(step, slot, out);
    auto it = index_.find(slot_key(step, slot));
    if (it == index_.end()) return;
    for (std::uint32_t idx : it->second) {
        const bool dynamic = (idx & kDynamicBit) != 0;
        const Placement& p = dynamic ? dyn_placements_[idx & ~kDynamicBit] : schedule_->placements[idx];
        const auto& payload = dynamic ? dyn_payloads_[p.payload] : schedule_->payloads[p.payload];
        std::copy(payload.begin(), payload.end(), out + p.offset);
    }
}

LedgerEntry TrainingStream::place_dynamic(const std::string& experiment_id, TokenClass cls,
                                          const std::vector<Token>& payload, int window_begin,
                                          int window_end, Rng& rng) {
    const StreamDims d = dims();
    if (payload.empty() || static_cast<int>(payload.size()) > d.seq_len) {
        throw ValidationError("dynamic payload must fit a single sequence");
    }
    if (window_begin < 0 || window_end > d.n_steps || window_begin >= window_end) {
        throw ValidationError("dynamic placement window out of range");
    }
    const int max_offset = d.seq_len - static_cast<int>(payload.size());
    for (int attempt = 0; attempt < kPlacementAttempts; ++attempt) {
        const int step = window_begin +
                         static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(window_end - window_begin)));
        const int slot = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(d.batch_size)));
        const int offset = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(max_offset + 1)));
        if (!range_free(step, slot, offset, static_cast<int>(payload.size()))) continue;
        dyn_payloads_.push_back(payload);
        Placement p{-2, step, slot, offset, static_cast<int>(payload.size()),
                    static_cast<std::uint32_t>(dyn_payloads_.size() - 1)};
        dyn_placements_.push_back(p);
        index_placement(dyn_placements_.back(), true);

        std::vector<Token> base_seq = base_->sequence(step, slot);
        int identical = 0;
        for (std::size_t i = 0; i < payload.size(); ++i) {
            if (base_seq[static_cast<std::size_t>(offset) + i] == payload[i]) ++identical;
        }
        return {experiment_id, step, slot, offset, static_cast<int>(payload.size()), cls, p.payload,
                identical};
    }
    throw CapacityError("cannot place dynamic payload for experiment " + experiment_id);
}

LedgerEntry TrainingStream::replace_batch(const std::string& experiment_id, int step,
                                          const std::vector<std::vector<Token>>& batch,
                                          TokenClass cls) {
    const StreamDims d = dims();
    if (step < 0 || step >= d.n_steps) throw ValidationError("replace_batch: step out of range");
    if (static_cast<int>(batch.size()) != d.batch_size) {
        throw ValidationError("replace_batch: batch size mismatch");
    }
    int identical = 0;
    for (int slot = 0; slot < d.batch_size; ++slot) {
        const auto& tokens = batch[static_cast<std::size_t>(slot)];
        if (static_cast<int>(tokens.size()) != d.seq_len) {
            throw ValidationError("replace_batch: sequence length mismatch");
        }
        if (!range_free(step, slot, 0, d.seq_len)) {
            throw CapacityError("replace_batch: step already carries placements");
        }
    }
    for (int slot = 0; slot < d.batch_size; ++slot) {
        const auto& tokens = batch[static_cast<std::size_t>(slot)];
        std::vector<Token> base_seq = base_->sequence(step, slot);
        for (int i = 0; i < d.seq_len; ++i) {
            if (base_seq[static_cast<std::size_t>(i)] == tokens[static_cast<std::size_t>(i)]) ++identical;
        }
        dyn_payloads_.push_back(tokens);
        dyn_placements_.push_back({-2, step, slot, 0, d.seq_len,
                                   static_cast<std::uint32_t>(dyn_payloads_.size() - 1)});
        index_placement(dyn_placements_.back(), true);
    }
    return {experiment_id, step, -1, 0, d.batch_size * d.seq_len, cls,
            static_cast<std::uint32_t>(dyn_payloads_.size() - 1), identical};
}

void TrainingStream::save_overlay(std::string& out) const {
    json j;
    j["placements"] = json::array();
    for (const auto& p : dyn_placements_) {
        j["placements"].push_back({p.step, p.slot, p.offset, p.length, p.payload});
    }
    j["payloads"] = dyn_payloads_;
    out = j.dump();
}

void TrainingStream::load_overlay(const std::string& in) {
    if (!dyn_placements_.empty()) throw ValidationError("overlay already populated");
    json j = json::parse(in);
    dyn_payloads_ = j.at("payloads").get<std::vector<std::vector<Token>>>();
    for (const auto& jp : j.at("placements")) {
        Placement p{-2, jp[0].get<int>(), jp[1].get<int>(), jp[2].get<int>(), jp[3].get<int>(),
                    jp[4].get<std::uint32_t>()};
        dyn_placements_.push_back(p);
        index_placement(dyn_placements_.back(), true);
    }
}

std::string Schedule::to_json() const {
    json j;
    j["stream_identity"] = stream_identity;
    j["dims"] = {dims.n_steps, dims.batch_size, dims.seq_len};
    j["placements"] = json::array();
    for (const auto& p : placements) {
        j["placements"].push_back({p.experiment, p.step, p.slot, p.offset, p.length, p.payload});
    }
    j["noise"] = json::array();
    for (const auto& n : noise) {
        j["noise"].push_back({n.experiment, n.step, n.slot, n.seed, n.sigma});
    }
    j["payloads"] = payloads;
    return j.dump();
}

Schedule Schedule::from_json(const std::string& text) {
    json j = json::parse(text);
    Schedule s;
    s.stream_identity = j.at("stream_identity").get<std::uint64_t>();
    s.dims = {j["dims"][0].get<int>(), j["dims"][1].get<int>(), j["dims"][2].get<int>()};
    for (const auto& jp : j.at("placements")) {
        s.placements.push_back({jp[0].get<int>(), jp[1].get<int>(), jp[2].get<int>(), jp[3].get<int>(),
                                jp[4].get<int>(), jp[5].get<std::uint32_t>()});
    }
    for (const auto& jn : j.at("noise")) {
        s.noise.push_back({jn[0].get<int>(), jn[1].get<int>(), jn[2].get<int>(),
                           jn[3].get<std::uint64_t>(), jn[4].get<double>()});
    }
    s.payloads = j.at("payloads").get<std::vector<std::vector<Token>>>();
    return s;
}

void add_batch_replacement(ExperimentManifest& manifest, PayloadCatalog& catalog,
                           const std::string& id, int step, const TokenStream& holdout,
                           int holdout_step) {
    const StreamDims d = holdout.dims();
    Experiment e;
    e.id = id;
    e.kind = ExperimentKind::replace_batch;
    e.window_begin = step;
    e.window_end = step + 1;
    e.token_class = TokenClass::iid;
    e.budget_tokens = d.tokens_per_step();
    manifest.experiments.push_back(e);
    std::vector<PayloadItem> items;
    for (int slot = 0; slot < d.batch_size; ++slot) {
        items.push_back({holdout.sequence(holdout_step, slot), 1});
    }
    catalog[id] = std::move(items);
}

}  // namespace pmx
