#include "klp/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "klp/error.hpp"
#include "klp/io.hpp"
#include "klp/random.hpp"

namespace klp {

void SynthSpec::validate(const CategorySchema& schema) const {
    if (n_products == 0) throw ValidationError("n_products must be >= 1");
    if (attributes_per_category.empty()) throw ValidationError("at least one category is required");
    std::size_t anchors = 0;
    for (const auto& [category, n] : attributes_per_category) {
        if (!schema.contains(category)) throw ValidationError("unknown category '" + category + "'");
        if (n == 0) throw ValidationError("category '" + category + "' needs at least one value");
        anchors += CategorySchema::is_anchor(category) ? 1 : 0;
    }
    if (anchors == 0) throw ValidationError("at least one category_l* anchor category is required");
    if (!(noise >= 0.0 && noise < 1.0)) throw ValidationError("noise must be in [0, 1)");
    if (!(exponent >= 0.0) || !std::isfinite(exponent)) throw ValidationError("exponent must be >= 0");
    if (min_attributes < anchors) throw ValidationError("min_attributes must cover every anchor category");
    if (max_attributes < min_attributes) throw ValidationError("max_attributes must be >= min_attributes");
    if (max_attributes > attributes_per_category.size()) {
        throw ValidationError("max_attributes exceeds the number of categories");
    }
    if (base_dimension < 8) throw ValidationError("base_dimension must be >= 8");
    if (!(popularity_damping >= 0.0 && popularity_damping < 1.0)) {
        throw ValidationError("popularity_damping must be in [0, 1)");
    }
}

std::size_t SynthSpec::attribute_count() const {
    std::size_t n = 0;
    for (const auto& [category, k] : attributes_per_category) n += k;
    return n;
}

namespace {

struct CategoryDraw {
    std::string name;
    std::vector<double> cumulative;  // normalized
    std::vector<double> probability;
    std::size_t first_attribute = 0;  // offset into the flat attribute list
};

std::size_t draw_rank(const CategoryDraw& c, std::mt19937_64& rng) {
    const double u = rnd::unit_uniform(rng);
    auto it = std::upper_bound(c.cumulative.begin(), c.cumulative.end(), u);
    return std::min(static_cast<std::size_t>(it - c.cumulative.begin()), c.cumulative.size() - 1);
}

std::string product_id(std::size_t i, std::size_t n) {
    const int width = static_cast<int>(std::to_string(n).size());
    char buf[32];
    std::snprintf(buf, sizeof buf, "p%0*zu", width, i);
    return buf;
}

}  // namespace

SynthDataset generate(const SynthSpec& spec, const CategorySchema& schema) {
    spec.validate(schema);
    std::mt19937_64 rng(spec.seed);

    // Categories in schema order for a stable layout.
    std::vector<CategoryDraw> categories;
    std::vector<Attribute> attributes;
    for (const auto& name : schema.names()) {
        auto it = spec.attributes_per_category.find(name);
        if (it == spec.attributes_per_category.end()) continue;
        CategoryDraw c{name, {}, {}, attributes.size()};
        double total = 0.0;
        for (std::size_t r = 1; r <= it->second; ++r) {
            c.probability.push_back(std::pow(static_cast<double>(r), -spec.exponent));
            total += c.probability.back();
        }
        double acc = 0.0;
        for (auto& p : c.probability) {
            p /= total;
            acc += p;
            c.cumulative.push_back(acc);
        }
        for (std::size_t r = 1; r <= it->second; ++r) {
            attributes.push_back(make_attribute(name, name + "-" + std::to_string(r), schema));
        }
        categories.push_back(std::move(c));
    }

    const std::size_t d = spec.base_dimension;
    EmbeddingStore store(d);
    std::vector<Vector> bases;
    if (attributes.size() <= d) {
        const Matrix q = rnd::random_orthonormal(d, attributes.size(), rng);
        for (std::size_t j = 0; j < attributes.size(); ++j) bases.emplace_back(q.col(static_cast<Eigen::Index>(j)));
    } else {
        for (std::size_t j = 0; j < attributes.size(); ++j) bases.push_back(rnd::random_unit(d, rng));
    }
    for (std::size_t j = 0; j < attributes.size(); ++j) store.insert(attributes[j].text(), EmbeddingVector(bases[j]));

    std::vector<std::size_t> anchor_cats, other_cats;
    for (std::size_t c = 0; c < categories.size(); ++c) {
        (CategorySchema::is_anchor(categories[c].name) ? anchor_cats : other_cats).push_back(c);
    }

    SynthDataset out;
    std::vector<Product> products;
    for (std::size_t i = 0; i < spec.n_products; ++i) {
        const std::size_t span = spec.max_attributes - spec.min_attributes + 1;
        const std::size_t m = spec.min_attributes + static_cast<std::size_t>(rng() % span);
        std::vector<std::size_t> chosen = anchor_cats;
        std::vector<std::size_t> pool = other_cats;
        rnd::shuffle(pool, rng);
        for (std::size_t k = 0; chosen.size() < m && k < pool.size(); ++k) chosen.push_back(pool[k]);
        std::sort(chosen.begin(), chosen.end());

        ProductAnnotation ann;
        ann.product_id = product_id(i, spec.n_products);
        ann.source = AnnotationSource::fixture;
        Vector mixture = Vector::Zero(static_cast<Eigen::Index>(d));
        std::string title;
        for (auto c : chosen) {
            const auto& cat = categories[c];
            const std::size_t r = draw_rank(cat, rng);
            const std::size_t j = cat.first_attribute + r;
            const double coefficient = 1.0 - spec.popularity_damping * cat.probability[r] / cat.probability[0];
            mixture += coefficient * bases[j];
            ann.attributes.push_back(attributes[j]);
            if (!title.empty()) title += ' ';
            title += attributes[j].value;
        }
        std::sort(ann.attributes.begin(), ann.attributes.end());
        mixture.normalize();

        auto noisy = [&] {
            Vector v = (1.0 - spec.noise) * mixture;
            if (spec.noise > 0.0) v += spec.noise * rnd::random_unit(d, rng);
            return EmbeddingVector(v).normalized();
        };
        store.insert(image_key(ann.product_id), noisy());
        store.insert(text_key(ann.product_id), noisy());

        Product p;
        p.id = ann.product_id;
        p.image_ref = "synth://" + p.id + ".png";
        p.title = title;
        products.push_back(std::move(p));
        out.annotations.push_back(std::move(ann));
    }
    out.catalog = Catalog(std::move(products));
    out.embeddings = std::move(store);
    return out;
}

SynthPaths write_dataset(const SynthDataset& data, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    SynthPaths paths{dir / "catalog.jsonl", dir / "annotations.jsonl", dir / "embeddings.jsonl"};
    io::write_file_atomic(paths.catalog, serialize_catalog(data.catalog));
    io::write_file_atomic(paths.annotations, serialize_annotations(data.annotations));
    io::write_file_atomic(paths.embeddings, serialize_embeddings(data.embeddings));
    return paths;
}

}  // namespace klp
