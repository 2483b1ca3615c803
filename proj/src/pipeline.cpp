#include "klp/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <functional>
#include <optional>

#include <spdlog/spdlog.h>

#include "klp/eval.hpp"
#include "klp/io.hpp"
#include "klp/parallel.hpp"

namespace klp::pipeline {

using nlohmann::json;
namespace fs = std::filesystem;

bool is_stage(std::string_view name) {
    return std::find(std::begin(kStages), std::end(kStages), name) != std::end(kStages);
}

MissingUpstreamError::MissingUpstreamError(const std::string& stage, const std::string& upstream,
                                           const std::string& file)
    : ValidationError("stage '" + stage + "' needs " + file + " from the '" + upstream + "' stage; run '" + upstream +
                      "' first"),
      upstream_(upstream) {}

StageError::StageError(const std::string& stage, const std::string& what, int exit_code)
    : Error("stage '" + stage + "': " + what), stage_(stage), exit_code_(exit_code) {}

bool in_holdout(const std::string& product_id, double fraction, std::uint64_t seed) {
    if (fraction <= 0.0) return false;
    constexpr std::uint64_t kBuckets = 1000000;
    const auto bucket = feature_hash(product_id, seed ^ 0x686f6c646f7574ULL) % kBuckets;
    return static_cast<double>(bucket) < fraction * static_cast<double>(kBuckets);
}

json read_manifest(const fs::path& output_dir) {
    const auto path = output_dir / "manifest.json";
    if (!fs::exists(path)) return json::object();
    try {
        return json::parse(io::read_file(path));
    } catch (const json::parse_error& e) {
        throw ParseError("manifest.json: " + std::string(e.what()));
    }
}

namespace {

constexpr int kStageVersion = 1;

struct StageDef {
    const char* name;
    std::vector<std::pair<const char*, const char*>> needs;  // (upstream stage, file)
    std::vector<const char*> outputs;
};

const std::vector<StageDef>& stage_defs() {
    static const std::vector<StageDef> defs = {
        {"ingest", {}, {"catalog.jsonl", "annotations.jsonl"}},
        {"curate", {{"ingest", "catalog.jsonl"}, {"ingest", "annotations.jsonl"}}, {"vocab.jsonl"}},
        {"train",
         {{"ingest", "catalog.jsonl"}, {"ingest", "annotations.jsonl"}, {"curate", "vocab.jsonl"}},
         {"head.json", "train_log.jsonl"}},
        {"match", {{"ingest", "catalog.jsonl"}, {"curate", "vocab.jsonl"}, {"train", "head.json"}}, {"assignments.jsonl"}},
        {"querygen", {{"curate", "vocab.jsonl"}, {"match", "assignments.jsonl"}}, {"queries_all.jsonl", "queries.jsonl"}},
        {"feedgen", {{"match", "assignments.jsonl"}, {"querygen", "queries.jsonl"}}, {"collections.jsonl"}},
        {"eval",
         {{"ingest", "catalog.jsonl"},
          {"ingest", "annotations.jsonl"},
          {"curate", "vocab.jsonl"},
          {"train", "head.json"},
          {"match", "assignments.jsonl"},
          {"feedgen", "collections.jsonl"}},
         {"report.jsonl", "report.txt", "alignment.jsonl"}},
        {"related",
         {{"ingest", "catalog.jsonl"}, {"curate", "vocab.jsonl"}, {"train", "head.json"}, {"feedgen", "collections.jsonl"}},
         {"related.jsonl"}},
    };
    return defs;
}

const StageDef& stage_def(std::string_view name) {
    for (const auto& d : stage_defs()) {
        if (name == d.name) return d;
    }
    throw ValidationError("unknown stage '" + std::string(name) + "'");
}

struct ExternalInput {
    std::string key;
    fs::path path;
};

std::vector<ExternalInput> external_inputs(std::string_view stage, const PipelineConfig& cfg) {
    std::vector<ExternalInput> out;
    auto add = [&](const char* key, const std::optional<fs::path>& p) {
        if (p) out.push_back({key, *p});
    };
    if (stage == "ingest") {
        if (cfg.paths.catalog.empty()) throw ValidationError("paths.catalog is not set");
        out.push_back({"paths.catalog", cfg.paths.catalog});
        if (cfg.annotate_with_client) {
            if (!cfg.paths.annotation_prompt) throw ValidationError("paths.annotation_prompt is not set");
            add("paths.annotation_prompt", cfg.paths.annotation_prompt);
        } else {
            if (cfg.paths.annotations.empty()) throw ValidationError("paths.annotations is not set");
            out.push_back({"paths.annotations", cfg.paths.annotations});
        }
    } else if (stage == "curate") {
        add("paths.review_list", cfg.paths.review_list);
        add("paths.embeddings", cfg.paths.embeddings);
    } else if (stage == "train" || stage == "match" || stage == "eval" || stage == "related") {
        add("paths.embeddings", cfg.paths.embeddings);
    } else if (stage == "querygen") {
        add("paths.rules", cfg.paths.rules);
        if (cfg.querygen.use_llm) {
            if (!cfg.paths.query_prompt) throw ValidationError("paths.query_prompt is not set");
            add("paths.query_prompt", cfg.paths.query_prompt);
        }
    }
    for (const auto& in : out) {
        if (!fs::exists(in.path)) throw ValidationError(in.key + " not found: " + in.path.string());
    }
    return out;
}

std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

struct StageOutput {
    std::map<std::string, std::string> files;
    std::map<std::string, std::size_t> rows;
};

// Lazily loaded artifacts shared by the stage bodies.
class Context {
public:
    Context(const PipelineConfig& cfg, const RunOptions& opts) : cfg_(cfg), opts_(opts), schema_(cfg.schema()) {}

    const PipelineConfig& cfg() const { return cfg_; }
    const CategorySchema& schema() const { return schema_; }
    fs::path out(const char* file) const { return cfg_.paths.output_dir / file; }

    const Catalog& catalog() {
        if (!catalog_) catalog_ = load_catalog(out("catalog.jsonl"));
        return *catalog_;
    }
    const std::vector<ProductAnnotation>& annotations() {
        if (!annotations_) annotations_ = load_annotations(out("annotations.jsonl"), catalog(), schema_);
        return *annotations_;
    }
    const AttributeVocabulary& vocab() {
        if (!vocab_) vocab_ = load_vocabulary(out("vocab.jsonl"), schema_);
        return *vocab_;
    }
    const ProjectionHead& head() {
        if (!head_) head_ = load_head(out("head.json"));
        return *head_;
    }
    const std::vector<AttributeAssignment>& assignments() {
        if (!assignments_) assignments_ = load_assignments(out("assignments.jsonl"), schema_);
        return *assignments_;
    }

    std::size_t base_dimension() {
        if (!base_dimension_) {
            base_dimension_ = cfg_.paths.embeddings ? load_embeddings(*cfg_.paths.embeddings).dimension()
                                                    : cfg_.fallback_dimension;
        }
        return *base_dimension_;
    }

    /// Feature-hashed base of an attribute's value text.
    AttributeEmbedder fallback_embedder() {
        const std::size_t d = base_dimension();
        const auto seed = cfg_.seed;
        return [d, seed](const Attribute& a) { return hash_embed(a.value, d, seed); };
    }

    /// Precomputed bases completed with hashed text for products that have
    /// neither image nor text vectors and for vocabulary attributes without a
    /// base.
    const EmbeddingStore& store() {
        if (store_) return *store_;
        EmbeddingStore s = cfg_.paths.embeddings ? load_embeddings(*cfg_.paths.embeddings)
                                                 : EmbeddingStore(cfg_.fallback_dimension);
        const std::size_t d = s.dimension();
        for (const auto& p : catalog()) {
            if (s.find(image_key(p.id)) || s.find(text_key(p.id))) continue;
            std::string text = p.title + " " + p.description;
            for (const auto& tag : p.merchant_tags) text += " " + tag;
            s.insert(text_key(p.id), hash_embed(text, d, cfg_.seed));
        }
        const auto fallback = fallback_embedder();
        for (const auto& a : vocab().retained) {
            if (!s.find(a.text())) s.insert(a.text(), fallback(a));
        }
        store_ = std::move(s);
        return *store_;
    }

    const ScoreCache& cache() {
        if (!cache_) {
            cache_ = build_score_cache(vocab(), head(), store(), cfg_.matcher.weights, cfg_.matcher.use_weights,
                                       fallback_embedder());
        }
        return *cache_;
    }

    EmbeddingVector product_vector(const std::string& id) {
        const auto& s = store();
        return product_embedding(head(), s.find(image_key(id)), s.find(text_key(id)));
    }

    clients::ChatClient client() const {
        if (cfg_.client.endpoint_url.empty() && !opts_.transport) {
            throw ValidationError("client.endpoint_url is not set");
        }
        auto transport = opts_.transport ? opts_.transport : std::make_shared<clients::HttpTransport>();
        return clients::ChatClient(cfg_.client, transport, opts_.sleeper);
    }

    /// Annotation attributes mapped into the vocabulary, per catalog product.
    GroundTruth truth() {
        GroundTruth t;
        for (const auto& p : catalog()) t[p.id];
        for (const auto& ann : annotations()) {
            for (const auto& a : ann.attributes) {
                if (auto c = vocab().canonicalize(a)) t[ann.product_id].insert(*c);
            }
        }
        return t;
    }

private:
    const PipelineConfig& cfg_;
    const RunOptions& opts_;
    CategorySchema schema_;
    std::optional<Catalog> catalog_;
    std::optional<std::vector<ProductAnnotation>> annotations_;
    std::optional<AttributeVocabulary> vocab_;
    std::optional<ProjectionHead> head_;
    std::optional<std::vector<AttributeAssignment>> assignments_;
    std::optional<std::size_t> base_dimension_;
    std::optional<EmbeddingStore> store_;
    std::optional<ScoreCache> cache_;
};

StageOutput run_ingest(Context& ctx) {
    const auto& cfg = ctx.cfg();
    Catalog catalog = load_catalog(cfg.paths.catalog);
    std::vector<ProductAnnotation> annotations;
    if (cfg.annotate_with_client) {
        const auto client = ctx.client();
        const auto prompt = clients::load_prompt_template(cfg.paths.annotation_prompt->string());
        std::vector<ProductAnnotation> slots(catalog.size());
        parallel_for(catalog.size(), cfg.workers, [&](std::size_t i) {
            slots[i] = annotate_product(catalog.products()[i], client, prompt, ctx.schema());
        });
        annotations = std::move(slots);
    } else {
        annotations = load_annotations(cfg.paths.annotations, catalog, ctx.schema());
        std::stable_sort(annotations.begin(), annotations.end(),
                         [](const auto& x, const auto& y) { return x.product_id < y.product_id; });
    }
    StageOutput out;
    out.files["catalog.jsonl"] = serialize_catalog(catalog);
    out.files["annotations.jsonl"] = serialize_annotations(annotations);
    out.rows["products"] = catalog.size();
    out.rows["annotations"] = annotations.size();
    return out;
}

StageOutput run_curate(Context& ctx) {
    const auto& cfg = ctx.cfg();
    std::set<Attribute> review;
    if (cfg.paths.review_list) review = load_review_list(*cfg.paths.review_list, ctx.schema());
    const auto vocab = curate_vocabulary(ctx.annotations(), cfg.vocab, ctx.fallback_embedder(), review);
    StageOutput out;
    out.files["vocab.jsonl"] = serialize_vocabulary(vocab);
    out.rows["retained"] = vocab.retained.size();
    out.rows["merged"] = vocab.canonical_map.size();
    return out;
}

StageOutput run_train(Context& ctx) {
    const auto& cfg = ctx.cfg();
    std::vector<TrainingPair> pairs;
    for (const auto& ann : ctx.annotations()) {
        if (in_holdout(ann.product_id, cfg.holdout_fraction, cfg.seed)) continue;
        std::set<Attribute> seen;
        for (const auto& a : ann.attributes) {
            auto c = ctx.vocab().canonicalize(a);
            if (c && seen.insert(*c).second) pairs.emplace_back(ann.product_id, *c);
        }
    }
    TrainingReport report;
    const auto head = train_projection(ctx.store(), pairs, cfg.train, &report);
    StageOutput out;
    out.files["head.json"] = to_json(head).dump() + "\n";
    std::string log;
    for (std::size_t e = 0; e < report.epoch_losses.size(); ++e) {
        log += json{{"epoch", e + 1}, {"loss", report.epoch_losses[e]}}.dump() + "\n";
    }
    out.files["train_log.jsonl"] = log;
    out.rows["pairs"] = report.pairs;
    out.rows["epochs"] = report.epoch_losses.size();
    return out;
}

StageOutput run_match(Context& ctx) {
    const auto& cfg = ctx.cfg();
    const auto& products = ctx.catalog().products();
    const auto& cache = ctx.cache();
    std::vector<EmbeddingVector> vectors;
    vectors.reserve(products.size());
    for (const auto& p : products) vectors.push_back(ctx.product_vector(p.id));
    std::vector<AttributeAssignment> assignments(products.size());
    parallel_for(products.size(), cfg.workers, [&](std::size_t i) {
        assignments[i] = assign_attributes(products[i].id, score_product(vectors[i], cache), cfg.matcher);
    });
    std::size_t total = 0;
    for (const auto& a : assignments) total += a.matched.size();
    StageOutput out;
    out.files["assignments.jsonl"] = serialize_assignments(assignments);
    out.rows["products"] = assignments.size();
    out.rows["assigned_attributes"] = total;
    return out;
}

StageOutput run_querygen(Context& ctx) {
    const auto& cfg = ctx.cfg();
    auto enumeration = cfg.querygen.enumeration;
    enumeration.workers = cfg.workers;
    const auto combos = enumerate_combinations(ctx.assignments(), enumeration);
    const ValidationRules rules = cfg.paths.rules ? load_rules(*cfg.paths.rules, ctx.schema()) : ValidationRules{};

    std::vector<GeneratedQuery> generated(combos.size());
    if (cfg.querygen.use_llm) {
        const auto client = ctx.client();
        const auto prompt = clients::load_prompt_template(cfg.paths.query_prompt->string());
        parallel_for(combos.size(), cfg.workers,
                     [&](std::size_t i) { generated[i] = generate_with_llm(combos[i], client, prompt, rules); });
    } else {
        const auto templates = TitleTemplates::defaults(ctx.schema());
        const auto& freq = ctx.vocab().frequencies;
        const auto quantiles = compute_quantiles(combos, freq);
        parallel_for(combos.size(), cfg.workers, [&](std::size_t i) {
            generated[i] = generate_fallback(combos[i], rules, templates, freq, quantiles);
        });
    }
    const auto kept = filter_queries(generated, cfg.querygen.min_score);
    StageOutput out;
    out.files["queries_all.jsonl"] = serialize_queries(generated);
    out.files["queries.jsonl"] = serialize_queries(kept);
    out.rows["combinations"] = combos.size();
    out.rows["queries"] = kept.size();
    return out;
}

StageOutput run_feedgen(Context& ctx) {
    const auto& cfg = ctx.cfg();
    std::vector<CollectionQuery> queries;
    for (const auto& q : load_queries(ctx.out("queries.jsonl"), ctx.schema())) queries.push_back(to_collection_query(q));
    auto feed = cfg.feed;
    feed.workers = cfg.workers;
    const auto collections = build_feeds(queries, ctx.assignments(), feed);
    StageOutput out;
    out.files["collections.jsonl"] = serialize_collections(collections);
    out.rows["collections"] = collections.size();
    return out;
}

StageOutput run_eval(Context& ctx) {
    const auto& cfg = ctx.cfg();
    const auto truth = ctx.truth();
    std::vector<MetricReport> reports;

    std::vector<std::string> holdout;
    for (const auto& p : ctx.catalog()) {
        if (in_holdout(p.id, cfg.holdout_fraction, cfg.seed) && !truth.at(p.id).empty()) holdout.push_back(p.id);
    }
    if (holdout.empty()) {
        spdlog::warn("eval: no held-out products with ground truth; recall skipped");
    } else {
        std::vector<LabeledExample> examples(holdout.size());
        const auto& cache = ctx.cache();
        std::vector<EmbeddingVector> vectors;
        for (const auto& id : holdout) vectors.push_back(ctx.product_vector(id));
        parallel_for(holdout.size(), cfg.workers, [&](std::size_t i) {
            examples[i] = {holdout[i], truth.at(holdout[i]), score_product(vectors[i], cache)};
        });
        for (auto k : cfg.recall_k) reports.push_back(recall_at_k(examples, k));
    }

    const auto collections = load_collections(ctx.out("collections.jsonl"), ctx.schema());
    if (!collections.empty()) {
        for (auto& r : precision_at_k(collections, truth, cfg.precision_k)) reports.push_back(std::move(r));
    }

    std::string alignment;
    try {
        const auto result = distribution_alignment(assignment_counts(ctx.assignments()), ctx.vocab().frequencies);
        alignment += json{{"rank_correlation", result.rank_correlation}}.dump() + "\n";
        for (const auto& row : result.rows) {
            alignment += json{{"category", row.attribute.category},
                              {"value", row.attribute.value},
                              {"predicted", row.predicted},
                              {"training", row.training},
                              {"ratio", row.ratio}}
                             .dump() +
                         "\n";
        }
    } catch (const Error& e) {
        spdlog::warn("eval: distribution alignment skipped: {}", e.what());
    }

    StageOutput out;
    out.files["report.jsonl"] = serialize_reports(reports);
    out.files["report.txt"] = render_report_table(reports);
    out.files["alignment.jsonl"] = alignment;
    out.rows["metrics"] = reports.size();
    out.rows["recall_examples"] = holdout.size();
    return out;
}

StageOutput run_related(Context& ctx) {
    const auto collections = load_collections(ctx.out("collections.jsonl"), ctx.schema());
    std::map<std::string, std::vector<RelatedCollection>> related;
    if (!collections.empty()) {
        related = related_collections(collections, ctx.head(), ctx.store(), ctx.cfg().related_k,
                                      ctx.fallback_embedder());
    }
    StageOutput out;
    out.files["related.jsonl"] = serialize_related(related);
    out.rows["collections"] = related.size();
    return out;
}

StageOutput dispatch(std::string_view stage, Context& ctx) {
    if (stage == "ingest") return run_ingest(ctx);
    if (stage == "curate") return run_curate(ctx);
    if (stage == "train") return run_train(ctx);
    if (stage == "match") return run_match(ctx);
    if (stage == "querygen") return run_querygen(ctx);
    if (stage == "feedgen") return run_feedgen(ctx);
    if (stage == "eval") return run_eval(ctx);
    return run_related(ctx);
}

StageResult run_one(const StageDef& def, const PipelineConfig& cfg, const RunOptions& opts, json& manifest) {
    const std::string stage = def.name;
    const fs::path& dir = cfg.paths.output_dir;
    auto& stages = manifest["stages"];
    if (!stages.is_object()) stages = json::object();

    json inputs = json::object();
    for (const auto& [upstream, file] : def.needs) {
        const auto path = dir / file;
        if (!stages.contains(upstream) || !fs::exists(path)) throw MissingUpstreamError(stage, upstream, file);
        inputs[file] = io::sha256_file(path);
    }
    for (const auto& in : external_inputs(stage, cfg)) inputs[in.key] = io::sha256_file(in.path);

    const std::string config_hash = cfg.hash();
    if (!opts.force && stages.contains(stage)) {
        const auto& prev = stages[stage];
        bool same = prev.value("version", 0) == kStageVersion && prev.value("config_hash", "") == config_hash &&
                    prev.value("inputs", json::object()) == inputs;
        for (const auto* file : def.outputs) {
            if (!same) break;
            const auto path = dir / file;
            same = fs::exists(path) && prev["outputs"].value(file, "") == io::sha256_file(path);
        }
        if (same) {
            spdlog::info("{}: inputs unchanged, skipping (use --force to rerun)", stage);
            StageResult r{stage, true, {}};
            const json rows = prev.value("rows", json::object());
            for (const auto& [k, v] : rows.items()) r.rows[k] = v.get<std::size_t>();
            return r;
        }
    }

    spdlog::info("{}: running", stage);
    const std::string started = utc_now();
    Context ctx(cfg, opts);
    StageOutput produced = dispatch(stage, ctx);

    fs::create_directories(dir);
    json outputs = json::object();
    for (const auto* file : def.outputs) {
        const auto& content = produced.files.at(file);
        io::write_file_atomic(dir / file, content);
        outputs[file] = io::sha256_hex(content);
    }
    json rows = json::object();
    for (const auto& [k, v] : produced.rows) rows[k] = v;
    stages[stage] = {{"version", kStageVersion}, {"config_hash", config_hash}, {"inputs", inputs},
                     {"outputs", outputs},       {"rows", rows},               {"started_at", started},
                     {"finished_at", utc_now()}};
    manifest["config_hash"] = config_hash;
    io::write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
    spdlog::info("{}: done {}", stage, rows.dump());
    return {stage, false, produced.rows};
}

}  // namespace

std::vector<StageResult> run_stage(const std::string& stage, const PipelineConfig& cfg, const RunOptions& opts) {
    std::vector<const StageDef*> order;
    if (stage == "all") {
        for (const auto& d : stage_defs()) order.push_back(&d);
    } else {
        order.push_back(&stage_def(stage));
    }
    json manifest = read_manifest(cfg.paths.output_dir);
    std::vector<StageResult> results;
    for (const auto* def : order) {
        try {
            results.push_back(run_one(*def, cfg, opts, manifest));
        } catch (const MissingUpstreamError&) {
            throw;
        } catch (const StageError&) {
            throw;
        } catch (const ValidationError& e) {
            throw StageError(def->name, e.what(), 1);
        } catch (const ParseError& e) {
            throw StageError(def->name, e.what(), 1);
        } catch (const std::exception& e) {
            throw StageError(def->name, e.what(), 2);
        }
    }
    return results;
}

}  // namespace klp::pipeline
