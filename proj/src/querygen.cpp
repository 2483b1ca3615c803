#include "klp/querygen.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <unordered_map>

#include <spdlog/spdlog.h>

#include "klp/error.hpp"
#include "klp/io.hpp"
#include "klp/parallel.hpp"

namespace klp {

using nlohmann::json;

std::string AttributeCombination::key() const {
    std::string out;
    for (const auto& a : attributes) {
        if (!out.empty()) out += '|';
        out += a.text();
    }
    return out;
}

void check_combination(const AttributeCombination& combo) {
    const auto n = combo.attributes.size();
    if (n < 3 || n > 4) throw ValidationError("combination must have 3-4 attributes, got " + std::to_string(n));
    std::set<std::string> categories;
    bool anchored = false;
    for (const auto& a : combo.attributes) {
        if (!categories.insert(a.category).second) {
            throw ValidationError("combination repeats category '" + a.category + "'");
        }
        anchored = anchored || CategorySchema::is_anchor(a.category);
    }
    if (!anchored) throw ValidationError("combination lacks a category attribute");
}

std::string_view to_string(Generator g) { return g == Generator::llm ? "llm" : "fallback"; }

// ---------------------------------------------------------------------------
// Rules

ValidationRules parse_rules(std::istream& in, const CategorySchema& schema) {
    ValidationRules rules;
    io::for_each_jsonl(in, [&](const json& record, std::size_t line) {
        const auto type = io::require_string(record, "type", line);
        auto left = attribute_from_json(io::require_field(record, "left", line), schema, line);
        auto right = attribute_from_json(io::require_field(record, "right", line), schema, line);
        if (type == "implies") rules.implied.emplace_back(std::move(left), std::move(right));
        else if (type == "conflicts") rules.conflicts.emplace_back(std::move(left), std::move(right));
        else throw ParseError("unknown rule type '" + type + "'", line);
    });
    return rules;
}

ValidationRules load_rules(const std::filesystem::path& path, const CategorySchema& schema) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open rules file " + path.string());
    try {
        return parse_rules(in, schema);
    } catch (const ParseError& e) {
        throw ParseError(path.filename().string() + ": " + e.what(), e.line());
    }
}

RuleVerdict validate_combination(const AttributeCombination& combo, const ValidationRules& rules) {
    auto has = [&](const Attribute& a) {
        return std::find(combo.attributes.begin(), combo.attributes.end(), a) != combo.attributes.end();
    };
    for (const auto& [left, right] : rules.implied) {
        if (has(left) && has(right)) {
            return {false, "redundant: " + left.text() + " implies " + right.text()};
        }
    }
    for (const auto& [left, right] : rules.conflicts) {
        if (has(left) && has(right)) {
            return {false, "conflict: " + left.text() + " conflicts with " + right.text()};
        }
    }
    return {true, std::nullopt};
}

// ---------------------------------------------------------------------------
// Enumeration

namespace {

using Tids = std::vector<std::uint32_t>;

Tids intersect(const Tids& a, const Tids& b) {
    Tids out;
    out.reserve(std::min(a.size(), b.size()));
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
    return out;
}

struct Itemset {
    std::vector<std::uint32_t> items;  // ascending item ids
    Tids tids;
};

}  // namespace

std::vector<AttributeCombination> enumerate_combinations(const std::vector<AttributeAssignment>& assignments,
                                                         const EnumerationConfig& cfg) {
    if (cfg.min_support < 1) throw ValidationError("min_support must be >= 1");
    if (cfg.min_size < 3 || cfg.max_size > 4 || cfg.min_size > cfg.max_size) {
        throw ValidationError("combination sizes must lie within [3, 4]");
    }

    // Item ids follow attribute order so itemsets stay sorted by attribute.
    std::set<Attribute> universe;
    for (const auto& a : assignments) {
        for (const auto& s : a.matched) universe.insert(s.attribute);
    }
    const std::vector<Attribute> items(universe.begin(), universe.end());
    std::unordered_map<Attribute, std::uint32_t> item_id;
    for (std::uint32_t i = 0; i < items.size(); ++i) item_id.emplace(items[i], i);

    std::vector<Tids> postings(items.size());
    for (std::uint32_t p = 0; p < assignments.size(); ++p) {
        std::set<std::uint32_t> present;
        for (const auto& s : assignments[p].matched) present.insert(item_id.at(s.attribute));
        for (auto id : present) postings[id].push_back(p);
    }

    std::vector<Itemset> level;
    for (std::uint32_t i = 0; i < items.size(); ++i) {
        if (postings[i].size() >= cfg.min_support) level.push_back({{i}, postings[i]});
    }

    std::vector<AttributeCombination> out;
    for (std::size_t size = 2; size <= cfg.max_size && !level.empty(); ++size) {
        std::set<std::vector<std::uint32_t>> frequent;
        for (const auto& s : level) frequent.insert(s.items);

        // Join itemsets sharing all but their last item.
        struct Candidate {
            std::size_t base;
            std::uint32_t extra;
        };
        std::vector<Candidate> candidates;
        for (std::size_t x = 0; x < level.size(); ++x) {
            for (std::size_t y = x + 1; y < level.size(); ++y) {
                const auto& a = level[x].items;
                const auto& b = level[y].items;
                if (!std::equal(a.begin(), a.end() - 1, b.begin())) break;
                const auto extra = b.back();
                const auto& extra_cat = items[extra].category;
                const bool clash = std::any_of(a.begin(), a.end(), [&](std::uint32_t i) {
                    return items[i].category == extra_cat;
                });
                if (clash) continue;
                // Apriori pruning: every (size-1)-subset must be frequent.
                std::vector<std::uint32_t> joined = a;
                joined.push_back(extra);
                bool all_frequent = true;
                for (std::size_t drop = 0; drop + 2 < joined.size() && all_frequent; ++drop) {
                    std::vector<std::uint32_t> sub;
                    for (std::size_t k = 0; k < joined.size(); ++k) {
                        if (k != drop) sub.push_back(joined[k]);
                    }
                    all_frequent = frequent.count(sub) > 0;
                }
                if (all_frequent) candidates.push_back({x, extra});
            }
        }

        std::vector<Itemset> counted(candidates.size());
        parallel_for(candidates.size(), cfg.workers, [&](std::size_t c) {
            const auto& cand = candidates[c];
            counted[c].items = level[cand.base].items;
            counted[c].items.push_back(cand.extra);
            counted[c].tids = intersect(level[cand.base].tids, postings[cand.extra]);
        });

        std::vector<Itemset> next;
        for (auto& s : counted) {
            if (s.tids.size() < cfg.min_support) continue;
            if (size >= cfg.min_size) {
                AttributeCombination combo;
                for (auto id : s.items) combo.attributes.push_back(items[id]);
                combo.support = s.tids.size();
                const bool anchored = std::any_of(combo.attributes.begin(), combo.attributes.end(),
                                                  [](const Attribute& a) { return CategorySchema::is_anchor(a.category); });
                if (anchored) out.push_back(std::move(combo));
            }
            next.push_back(std::move(s));
        }
        level = std::move(next);
    }

    std::sort(out.begin(), out.end(), [](const AttributeCombination& x, const AttributeCombination& y) {
        if (x.support != y.support) return x.support > y.support;
        return x.key() < y.key();
    });
    return out;
}

// ---------------------------------------------------------------------------
// Rule-based titles and scoring

TitleTemplates TitleTemplates::defaults(const CategorySchema& schema) {
    TitleTemplates t;
    t.prefix_slots = {"brand", "gender", "age_group", "price_level", "color", "material",
                      "fit",   "stretch", "shape",   "style",       "details"};
    t.head_slots = {"category_l3", "category_l2", "category_l1"};
    t.suffix_slots = {"season", "festival", "occasion"};
    const auto& builtin = CategorySchema::builtin();
    for (const auto& name : schema.names()) {
        if (!builtin.contains(name)) t.prefix_slots.push_back(name);
    }
    return t;
}

std::string title_case(std::string_view text) {
    std::string out(text);
    bool word_start = true;
    for (auto& c : out) {
        if (c == ' ') {
            word_start = true;
        } else {
            if (word_start) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
            word_start = false;
        }
    }
    return out;
}

std::string synthesize_title_fallback(const AttributeCombination& combo, const TitleTemplates& templates) {
    auto value_of = [&](const std::string& category) -> const std::string* {
        for (const auto& a : combo.attributes) {
            if (a.category == category) return &a.value;
        }
        return nullptr;
    };
    const std::string* head = nullptr;
    for (const auto& slot : templates.head_slots) {
        if ((head = value_of(slot))) break;
    }
    if (!head) throw ValidationError("cannot title combination without a category attribute: " + combo.key());

    std::vector<std::string> words;
    for (const auto& slot : templates.prefix_slots) {
        if (const auto* v = value_of(slot)) words.push_back(title_case(*v));
    }
    words.push_back(title_case(*head));
    std::vector<std::string> suffix;
    for (const auto& slot : templates.suffix_slots) {
        if (const auto* v = value_of(slot)) suffix.push_back(title_case(*v));
    }
    if (!suffix.empty()) {
        words.push_back(templates.connector);
        words.insert(words.end(), suffix.begin(), suffix.end());
    }
    std::string title;
    for (const auto& w : words) {
        if (!title.empty()) title += ' ';
        title += w;
    }
    return title;
}

std::size_t nearest_rank(std::vector<std::size_t> values, double q) {
    if (values.empty()) return 0;
    std::sort(values.begin(), values.end());
    const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(values.size())));
    return values[std::clamp<std::size_t>(rank, 1, values.size()) - 1];
}

SupportQuantiles compute_quantiles(const std::vector<AttributeCombination>& combos, const FrequencyTable& freq) {
    std::vector<std::size_t> supports;
    supports.reserve(combos.size());
    for (const auto& c : combos) supports.push_back(c.support);
    std::vector<std::size_t> freqs;
    for (const auto& [_, count] : freq.counts()) freqs.push_back(count);
    return {nearest_rank(supports, 0.5), nearest_rank(supports, 0.8), nearest_rank(freqs, 0.5)};
}

int score_searchability_fallback(const AttributeCombination& combo, const FrequencyTable& freq,
                                 const SupportQuantiles& quantiles) {
    int score = 1;
    if (combo.support >= quantiles.p50) ++score;
    if (combo.support >= quantiles.p80) ++score;
    const bool common = std::all_of(combo.attributes.begin(), combo.attributes.end(),
                                    [&](const Attribute& a) { return freq.count(a) >= quantiles.median_frequency; });
    if (common) ++score;
    if (combo.attributes.size() == 3) ++score;
    return std::clamp(score, 1, 5);
}

GeneratedQuery generate_fallback(const AttributeCombination& combo, const ValidationRules& rules,
                                 const TitleTemplates& templates, const FrequencyTable& freq,
                                 const SupportQuantiles& quantiles) {
    GeneratedQuery q;
    q.combination = combo;
    q.generator = Generator::fallback;
    q.title = synthesize_title_fallback(combo, templates);
    q.searchability = score_searchability_fallback(combo, freq, quantiles);
    const auto verdict = validate_combination(combo, rules);
    q.valid = verdict.valid;
    q.invalid_reason = verdict.reason;
    return q;
}

// ---------------------------------------------------------------------------
// LLM generation

std::string describe_attributes(const AttributeCombination& combo) {
    std::string out;
    for (const auto& a : combo.attributes) {
        if (!out.empty()) out += ", ";
        out += a.category + ": " + a.value;
    }
    return out;
}

namespace {

const clients::Schema& reply_schema() {
    static const clients::Schema schema = {
        {"valid", clients::FieldType::boolean, true, {}, {}},
        {"reason", clients::FieldType::string, false, {}, {}},
        {"title", clients::FieldType::string, false, {}, {}},
        {"score", clients::FieldType::integer, false, 1.0, 5.0},
    };
    return schema;
}

GeneratedQuery parse_generation_reply(const AttributeCombination& combo, const std::string& reply) {
    const auto fields = clients::parse_structured(reply, reply_schema());
    GeneratedQuery q;
    q.combination = combo;
    q.generator = Generator::llm;
    q.valid = fields["valid"].get<bool>();
    if (fields.contains("title")) q.title = fields["title"].get<std::string>();
    if (q.valid) {
        if (q.title.find_first_not_of(" \t") == std::string::npos) {
            throw clients::ResponseParseError("valid reply without a title", reply);
        }
        if (!fields.contains("score")) throw clients::ResponseParseError("valid reply without a score", reply);
    }
    q.searchability = fields.contains("score") ? fields["score"].get<int>() : 1;
    if (!q.valid) {
        const auto reason = fields.contains("reason") ? fields["reason"].get<std::string>() : std::string();
        q.invalid_reason = reason.empty() ? "rejected by language model" : reason;
    }
    return q;
}

}  // namespace

GeneratedQuery generate_with_llm(const AttributeCombination& combo, const clients::ChatClient& client,
                                 const clients::PromptTemplate& prompt, const ValidationRules& rules) {
    const auto verdict = validate_combination(combo, rules);
    if (!verdict.valid) {
        GeneratedQuery q;
        q.combination = combo;
        q.generator = Generator::llm;
        q.valid = false;
        q.invalid_reason = verdict.reason;
        return q;
    }
    const auto messages = prompt.messages({{"attributes", describe_attributes(combo)}});
    for (int attempt = 0;; ++attempt) {
        const auto reply = client.chat_complete(messages);
        try {
            return parse_generation_reply(combo, reply);
        } catch (const clients::ResponseParseError& e) {
            if (attempt >= 1) throw;
            spdlog::warn("malformed generation reply for [{}], retrying: {}", combo.key(), e.what());
        }
    }
}

std::vector<GeneratedQuery> filter_queries(const std::vector<GeneratedQuery>& queries, int min_score) {
    if (min_score < 1 || min_score > 5) throw ValidationError("min_score must be in [1, 5]");
    std::map<std::string, std::size_t> best;  // title -> index into queries
    for (std::size_t i = 0; i < queries.size(); ++i) {
        const auto& q = queries[i];
        if (!q.valid || q.searchability < min_score) continue;
        auto [it, inserted] = best.emplace(q.title, i);
        if (inserted) continue;
        const auto& cur = queries[it->second].combination;
        if (q.combination.support > cur.support ||
            (q.combination.support == cur.support && q.combination.key() < cur.key())) {
            it->second = i;
        }
    }
    std::vector<std::size_t> keep;
    for (const auto& [_, i] : best) keep.push_back(i);
    std::sort(keep.begin(), keep.end());
    std::vector<GeneratedQuery> out;
    for (auto i : keep) out.push_back(queries[i]);
    return out;
}

json to_json(const GeneratedQuery& q) {
    json attrs = json::array();
    for (const auto& a : q.combination.attributes) attrs.push_back(to_json(a));
    json j = {{"title", q.title},
              {"attributes", attrs},
              {"searchability", q.searchability},
              {"valid", q.valid},
              {"generator", to_string(q.generator)},
              {"support", q.combination.support}};
    if (q.invalid_reason) j["invalid_reason"] = *q.invalid_reason;
    return j;
}

GeneratedQuery query_from_json(const json& j, const CategorySchema& schema, std::size_t line) {
    GeneratedQuery q;
    q.title = io::require_string(j, "title", line);
    const auto& attrs = io::require_field(j, "attributes", line);
    if (!attrs.is_array()) throw ParseError("field 'attributes' must be an array", line);
    for (const auto& a : attrs) q.combination.attributes.push_back(attribute_from_json(a, schema, line));
    std::sort(q.combination.attributes.begin(), q.combination.attributes.end());
    q.searchability = io::require_field(j, "searchability", line).get<int>();
    if (q.searchability < 1 || q.searchability > 5) throw ParseError("searchability must be in [1, 5]", line);
    q.valid = io::require_field(j, "valid", line).get<bool>();
    const auto gen = io::require_string(j, "generator", line);
    if (gen == "llm") q.generator = Generator::llm;
    else if (gen == "fallback") q.generator = Generator::fallback;
    else throw ParseError("unknown generator '" + gen + "'", line);
    q.combination.support = io::require_field(j, "support", line).get<std::size_t>();
    if (auto it = j.find("invalid_reason"); it != j.end() && it->is_string()) q.invalid_reason = it->get<std::string>();
    if (!q.valid && !q.invalid_reason) throw ParseError("invalid query without a reason", line);
    try {
        check_combination(q.combination);
    } catch (const ValidationError& e) {
        throw ParseError(e.what(), line);
    }
    return q;
}

std::string serialize_queries(const std::vector<GeneratedQuery>& queries) {
    std::string out;
    for (const auto& q : queries) out += to_json(q).dump() + '\n';
    return out;
}

std::vector<GeneratedQuery> load_queries(const std::filesystem::path& path, const CategorySchema& schema) {
    std::vector<GeneratedQuery> out;
    io::for_each_jsonl(path, [&](const json& record, std::size_t line) {
        out.push_back(query_from_json(record, schema, line));
    });
    return out;
}

}  // namespace klp
