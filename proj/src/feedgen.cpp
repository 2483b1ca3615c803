#include "klp/feedgen.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "klp/error.hpp"
#include "klp/io.hpp"
#include "klp/parallel.hpp"

namespace klp {

using nlohmann::json;

CollectionQuery to_collection_query(const GeneratedQuery& q) {
    CollectionQuery c{q.title, q.combination.attributes, q.searchability};
    std::sort(c.attributes.begin(), c.attributes.end());
    return c;
}

void FeedConfig::validate() const {
    if (min_products < 1) throw ValidationError("min_products must be >= 1");
    if (!std::isfinite(min_relevance)) throw ValidationError("min_relevance must be finite");
}

double popularity_weight(std::size_t frequency) {
    return 1.0 + std::sqrt(static_cast<double>(frequency)) / 100.0;
}

double attribute_confidence(const AttributeAssignment& product, const Attribute& attribute) {
    if (const auto* s = product.find(attribute)) return s->adjusted;
    throw ValidationError("attribute '" + attribute.text() + "' is not assigned to product '" + product.product_id +
                          "'");
}

double relevance(const CollectionQuery& query, const AttributeAssignment& product) {
    double sum = 0.0;
    for (const auto& a : query.attributes) {
        if (const auto* s = product.find(a)) sum += s->adjusted;
    }
    return sum;
}

namespace {

using Posting = std::vector<std::uint32_t>;

Posting intersect_all(std::vector<const Posting*> lists) {
    std::sort(lists.begin(), lists.end(), [](const Posting* a, const Posting* b) { return a->size() < b->size(); });
    Posting acc = *lists.front();
    Posting tmp;
    for (std::size_t i = 1; i < lists.size() && !acc.empty(); ++i) {
        tmp.clear();
        std::set_intersection(acc.begin(), acc.end(), lists[i]->begin(), lists[i]->end(), std::back_inserter(tmp));
        acc.swap(tmp);
    }
    return acc;
}

Posting union_all(const std::vector<const Posting*>& lists) {
    Posting acc;
    Posting tmp;
    for (const auto* l : lists) {
        tmp.clear();
        std::set_union(acc.begin(), acc.end(), l->begin(), l->end(), std::back_inserter(tmp));
        acc.swap(tmp);
    }
    return acc;
}

bool entry_before(const FeedEntry& x, const FeedEntry& y) {
    if (x.relevance != y.relevance) return x.relevance > y.relevance;
    return x.product_id < y.product_id;
}

}  // namespace

std::vector<Collection> build_feeds(const std::vector<CollectionQuery>& queries,
                                    const std::vector<AttributeAssignment>& assignments, const FeedConfig& cfg) {
    cfg.validate();

    // Products in ascending id order; postings hold positions in this order.
    std::vector<const AttributeAssignment*> products;
    products.reserve(assignments.size());
    for (const auto& a : assignments) {
        if (!cfg.trusted || cfg.trusted(a.product_id)) products.push_back(&a);
    }
    std::sort(products.begin(), products.end(),
              [](const AttributeAssignment* x, const AttributeAssignment* y) { return x->product_id < y->product_id; });

    // Attribute cache: id per attribute, postings per id, and per-product
    // (id, adjusted) pairs sorted by id.
    std::unordered_map<Attribute, std::uint32_t> ids;
    std::vector<Posting> postings;
    std::vector<std::vector<std::pair<std::uint32_t, double>>> scores(products.size());
    for (std::uint32_t p = 0; p < products.size(); ++p) {
        for (const auto& s : products[p]->matched) {
            auto [it, inserted] = ids.emplace(s.attribute, static_cast<std::uint32_t>(postings.size()));
            if (inserted) postings.emplace_back();
            if (!postings[it->second].empty() && postings[it->second].back() == p) continue;
            postings[it->second].push_back(p);
            scores[p].emplace_back(it->second, s.adjusted);
        }
        std::sort(scores[p].begin(), scores[p].end());
    }

    std::vector<std::optional<Collection>> built(queries.size());
    parallel_for(queries.size(), cfg.workers, [&](std::size_t qi) {
        const auto& query = queries[qi];
        if (query.attributes.empty()) return;
        std::vector<const Posting*> lists;
        std::vector<std::optional<std::uint32_t>> query_ids;
        static const Posting empty;
        for (const auto& a : query.attributes) {
            auto it = ids.find(a);
            query_ids.push_back(it == ids.end() ? std::nullopt : std::optional(it->second));
            lists.push_back(it == ids.end() ? &empty : &postings[it->second]);
        }
        if (cfg.require_all_attributes) {
            // Pre-filter: the rarest attribute bounds the candidate count.
            const bool too_rare = std::any_of(lists.begin(), lists.end(),
                                              [&](const Posting* l) { return l->size() < cfg.min_products; });
            if (too_rare) return;
        }
        const Posting candidates = cfg.require_all_attributes ? intersect_all(lists) : union_all(lists);
        if (candidates.size() < cfg.min_products) return;

        Collection c;
        c.query = query;
        for (auto p : candidates) {
            FeedEntry e;
            e.product_id = products[p]->product_id;
            const auto& ps = scores[p];
            for (std::size_t k = 0; k < query.attributes.size(); ++k) {
                if (!query_ids[k]) continue;
                auto it = std::lower_bound(ps.begin(), ps.end(), std::make_pair(*query_ids[k], -HUGE_VAL));
                if (it == ps.end() || it->first != *query_ids[k]) continue;
                e.relevance += it->second;
                e.contributing.emplace_back(query.attributes[k], it->second);
            }
            if (e.relevance >= cfg.min_relevance) c.entries.push_back(std::move(e));
        }
        if (c.entries.size() < cfg.min_products) return;
        std::sort(c.entries.begin(), c.entries.end(), entry_before);
        built[qi] = std::move(c);
    });

    std::vector<Collection> out;
    for (auto& c : built) {
        if (c) out.push_back(std::move(*c));
    }
    std::sort(out.begin(), out.end(), [](const Collection& x, const Collection& y) {
        if (x.query.title != y.query.title) return x.query.title < y.query.title;
        return x.query.attributes < y.query.attributes;
    });
    return out;
}

json to_json(const Collection& c) {
    json attrs = json::array();
    for (const auto& a : c.query.attributes) attrs.push_back(to_json(a));
    json products = json::array();
    for (const auto& e : c.entries) {
        json contributing = json::array();
        for (const auto& [a, score] : e.contributing) {
            contributing.push_back({{"category", a.category}, {"value", a.value}, {"score", score}});
        }
        products.push_back({{"product_id", e.product_id}, {"relevance", e.relevance}, {"contributing", contributing}});
    }
    return {{"title", c.query.title},
            {"attributes", attrs},
            {"searchability", c.query.searchability},
            {"products", products}};
}

std::string serialize_collections(const std::vector<Collection>& collections) {
    std::string out;
    for (const auto& c : collections) out += to_json(c).dump() + '\n';
    return out;
}

std::vector<Collection> load_collections(const std::filesystem::path& path, const CategorySchema& schema) {
    std::vector<Collection> out;
    io::for_each_jsonl(path, [&](const json& record, std::size_t line) {
        Collection c;
        c.query.title = io::require_string(record, "title", line);
        for (const auto& a : io::require_field(record, "attributes", line)) {
            c.query.attributes.push_back(attribute_from_json(a, schema, line));
        }
        if (auto it = record.find("searchability"); it != record.end() && it->is_number_integer()) {
            c.query.searchability = it->get<int>();
        }
        for (const auto& p : io::require_field(record, "products", line)) {
            FeedEntry e;
            e.product_id = io::require_string(p, "product_id", line);
            e.relevance = io::require_field(p, "relevance", line).get<double>();
            for (const auto& s : io::require_field(p, "contributing", line)) {
                e.contributing.emplace_back(attribute_from_json(s, schema, line),
                                            io::require_field(s, "score", line).get<double>());
            }
            c.entries.push_back(std::move(e));
        }
        out.push_back(std::move(c));
    });
    return out;
}

namespace {

std::map<std::string, std::vector<RelatedCollection>> rank_related(
    const std::vector<Collection>& collections, const std::vector<EmbeddingVector>& embeddings, std::size_t k) {
    std::map<std::string, std::vector<RelatedCollection>> out;
    for (std::size_t i = 0; i < collections.size(); ++i) {
        std::vector<RelatedCollection> ranked;
        for (std::size_t j = 0; j < collections.size(); ++j) {
            if (j == i) continue;
            ranked.push_back({collections[j].query.title, cosine_sim(embeddings[i], embeddings[j])});
        }
        std::sort(ranked.begin(), ranked.end(), [](const RelatedCollection& x, const RelatedCollection& y) {
            if (x.similarity != y.similarity) return x.similarity > y.similarity;
            return x.title < y.title;
        });
        if (ranked.size() > k) ranked.resize(k);
        out[collections[i].query.title] = std::move(ranked);
    }
    return out;
}

EmbeddingVector mean_embedding(const Collection& c, const std::function<const EmbeddingVector*(const Attribute&)>& lookup) {
    Vector sum;
    std::size_t found = 0;
    for (const auto& a : c.query.attributes) {
        const auto* e = lookup(a);
        if (!e) continue;
        if (found == 0) sum = Vector::Zero(static_cast<Eigen::Index>(e->dimension()));
        sum += e->values();
        ++found;
    }
    if (found == 0) throw ValidationError("collection '" + c.query.title + "' has no embeddable attributes");
    return EmbeddingVector(Vector(sum / static_cast<double>(found))).normalized();
}

}  // namespace

std::map<std::string, std::vector<RelatedCollection>> related_collections(const std::vector<Collection>& collections,
                                                                          const ScoreCache& cache, std::size_t k) {
    if (k < 1) throw ValidationError("k must be >= 1");
    std::vector<EmbeddingVector> embeddings;
    for (const auto& c : collections) {
        embeddings.push_back(mean_embedding(
            c,
            [&](const Attribute& a) -> const EmbeddingVector* {
                const auto* e = cache.find(a);
                return e ? &e->embedding : nullptr;
            }));
    }
    return rank_related(collections, embeddings, k);
}

std::map<std::string, std::vector<RelatedCollection>> related_collections(const std::vector<Collection>& collections,
                                                                          const ProjectionHead& head,
                                                                          const EmbeddingStore& store, std::size_t k,
                                                                          const AttributeEmbedder& fallback) {
    if (k < 1) throw ValidationError("k must be >= 1");
    std::map<Attribute, EmbeddingVector> projected;
    for (const auto& c : collections) {
        for (const auto& a : c.query.attributes) {
            if (projected.count(a)) continue;
            if (const auto* base = store.find(a.text())) {
                projected.emplace(a, attribute_embedding(head, *base));
            } else if (fallback) {
                projected.emplace(a, attribute_embedding(head, fallback(a)));
            }
        }
    }
    std::vector<EmbeddingVector> embeddings;
    for (const auto& c : collections) {
        embeddings.push_back(mean_embedding(
            c,
            [&](const Attribute& a) -> const EmbeddingVector* {
                auto it = projected.find(a);
                return it == projected.end() ? nullptr : &it->second;
            }));
    }
    return rank_related(collections, embeddings, k);
}

std::string serialize_related(const std::map<std::string, std::vector<RelatedCollection>>& related) {
    std::string out;
    for (const auto& [title, list] : related) {
        json items = json::array();
        for (const auto& r : list) items.push_back({{"title", r.title}, {"similarity", r.similarity}});
        out += json{{"title", title}, {"related", items}}.dump() + '\n';
    }
    return out;
}

}  // namespace klp
