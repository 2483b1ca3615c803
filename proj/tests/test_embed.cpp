#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "klp/embed.hpp"
#include "klp/io.hpp"
#include "support/oracles.hpp"
#include "support/test_util.hpp"

using namespace klp;

namespace {

Matrix to_matrix(const oracle::Mat& m) {
    Matrix out(static_cast<Eigen::Index>(m.size()), static_cast<Eigen::Index>(m[0].size()));
    for (std::size_t i = 0; i < m.size(); ++i) {
        for (std::size_t j = 0; j < m[i].size(); ++j) out(i, j) = m[i][j];
    }
    return out;
}

oracle::Mat random_mat(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    oracle::Mat m(rows, std::vector<double>(cols));
    for (auto& r : m) {
        for (auto& x : r) x = n(rng);
    }
    return m;
}

std::vector<std::size_t> random_permutation(std::size_t n, std::mt19937_64& rng) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    std::shuffle(p.begin(), p.end(), rng);
    return p;
}

EmbeddingVector vec(std::initializer_list<double> xs) { return EmbeddingVector(std::vector<double>(xs)); }

}  // namespace

TEST(HashEmbed, DeterministicAndUnitNorm) {
    const auto a = hash_embed("black silk dress for parties", 64, 7);
    const auto b = hash_embed("black silk dress for parties", 64, 7);
    EXPECT_EQ(a, b);
    EXPECT_NEAR(a.norm(), 1.0, 1e-9);
    EXPECT_NE(a, hash_embed("black silk dress for parties", 64, 8));
}

TEST(HashEmbed, MatchesScalarOracle) {
    const std::vector<std::pair<std::string, std::string>> pairs = {
        {"red wool sweater", "linen summer dress"},
        {"Michael Kors, black sunglasses!", "gold rings"},
        {"casual", "daywear"},
    };
    for (std::size_t d : {8u, 32u, 256u}) {
        for (std::uint64_t seed : {0ull, 42ull}) {
            for (const auto& [x, y] : pairs) {
                const auto ox = oracle::scalar_hash_embed(x, d, seed);
                const auto oy = oracle::scalar_hash_embed(y, d, seed);
                const auto ex = hash_embed(x, d, seed);
                for (std::size_t i = 0; i < d; ++i) EXPECT_NEAR(ex[i], ox[i], 1e-15);
                EXPECT_NEAR(cosine_sim(ex, hash_embed(y, d, seed)), oracle::scalar_cosine(ox, oy), 1e-12);
            }
        }
    }
}

TEST(HashEmbed, Errors) {
    EXPECT_THROW(hash_embed("", 16, 0), ValidationError);
    EXPECT_THROW(hash_embed(" ... ", 16, 0), ValidationError);
    EXPECT_THROW(hash_embed("dress", 4, 0), ValidationError);
    EXPECT_EQ(hash_tokens("  Hello, World!  it's "), (std::vector<std::string>{"hello", "world", "it's"}));
}

TEST(Combine, ClosedForms) {
    const auto u = vec({0.6, 0.8, 0.0});
    EXPECT_EQ(combine_product_embedding(u, u), u);
    const auto c = combine_product_embedding(vec({1, 0, 0}), vec({0, 1, 0}));
    EXPECT_NEAR(c[0], 1.0 / std::sqrt(2.0), 1e-15);
    EXPECT_NEAR(c[1], 1.0 / std::sqrt(2.0), 1e-15);
    EXPECT_THROW(combine_product_embedding(u, vec({-0.6, -0.8, 0.0})), NumericError);
    EXPECT_THROW(combine_product_embedding(u, vec({1, 0})), NumericError);

    std::mt19937_64 rng(3);
    for (int t = 0; t < 100; ++t) {
        const auto m = random_mat(2, 12, rng);
        const auto out = combine_product_embedding(EmbeddingVector(m[0]), EmbeddingVector(m[1]));
        EXPECT_NEAR(out.norm(), 1.0, 1e-9);
    }
}

TEST(Cosine, Examples) {
    const auto u = vec({0.6, 0.8});
    EXPECT_DOUBLE_EQ(cosine_sim(u, u), 1.0);
    EXPECT_DOUBLE_EQ(cosine_sim(vec({1, 0}), vec({0, 1})), 0.0);
    EXPECT_NEAR(cosine_sim(vec({1, 2, 3}), vec({4, 5, 6})), 0.974631846, 1e-6);
    EXPECT_THROW(cosine_sim(vec({0, 0}), u), NumericError);
    EXPECT_THROW(EmbeddingVector(std::vector<double>{1.0, NAN}), NumericError);
}

TEST(ContrastiveLoss, BatchOfOneIsZero) {
    const Matrix p = Matrix::Constant(1, 4, 0.3);
    const Matrix a = Matrix::Constant(1, 4, -0.2);
    const std::size_t pos[] = {0};
    for (bool symmetric : {true, false}) {
        const auto r = contrastive_loss(p, a, pos, 0.07, symmetric);
        EXPECT_NEAR(r.loss, 0.0, 1e-12);
        EXPECT_TRUE(r.degenerate);
    }
}

TEST(ContrastiveLoss, UniformSimilaritiesGiveLogN) {
    for (std::size_t n : {2u, 4u, 8u}) {
        const Matrix sims = Matrix::Constant(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n), 0.37);
        std::vector<std::size_t> pos(n);
        for (std::size_t i = 0; i < n; ++i) pos[i] = (i + 1) % n;
        const auto r = contrastive_loss_from_similarities(sims, pos, 0.07, true);
        EXPECT_NEAR(r.product_to_attribute, std::log(static_cast<double>(n)), 1e-9);
        EXPECT_NEAR(r.attribute_to_product, std::log(static_cast<double>(n)), 1e-9);
        EXPECT_NEAR(r.loss, std::log(static_cast<double>(n)), 1e-9);
    }
}

TEST(ContrastiveLoss, MatchesScalarOracleAndFiniteDifferences) {
    std::mt19937_64 rng(11);
    const std::size_t n = 4, d = 8;
    for (bool symmetric : {true, false}) {
        const auto P = random_mat(n, d, rng);
        const auto A = random_mat(n, d, rng);
        const auto pos = random_permutation(n, rng);
        const double tau = 0.5;
        const auto r = contrastive_loss(to_matrix(P), to_matrix(A), pos, tau, symmetric);
        EXPECT_NEAR(r.loss, oracle::scalar_contrastive_loss(P, A, pos, tau, symmetric), 1e-12);

        const auto gp = oracle::central_differences(
            [&](const oracle::Mat& x) { return oracle::scalar_contrastive_loss(x, A, pos, tau, symmetric); }, P, 1e-5);
        const auto ga = oracle::central_differences(
            [&](const oracle::Mat& x) { return oracle::scalar_contrastive_loss(P, x, pos, tau, symmetric); }, A, 1e-5);
        const Matrix fp = to_matrix(gp), fa = to_matrix(ga);
        EXPECT_LE((r.grad_products - fp).norm() / std::max(1e-12, fp.norm()), 1e-4);
        EXPECT_LE((r.grad_attributes - fa).norm() / std::max(1e-12, fa.norm()), 1e-4);
    }
}

TEST(ContrastiveLoss, Properties) {
    std::mt19937_64 rng(5);
    for (int t = 0; t < 50; ++t) {
        const std::size_t n = 2 + rng() % 7;
        const auto P = to_matrix(random_mat(n, 6, rng));
        const auto A = to_matrix(random_mat(n, 6, rng));
        const auto pos = random_permutation(n, rng);
        const auto r = contrastive_loss(P, A, pos, 0.2, true);
        EXPECT_GE(r.loss, -1e-12);

        // Permuting rows (and positives consistently) leaves the loss alone.
        const auto perm = random_permutation(n, rng);
        Matrix P2(P.rows(), P.cols());
        std::vector<std::size_t> pos2(n);
        for (std::size_t i = 0; i < n; ++i) {
            P2.row(static_cast<Eigen::Index>(i)) = P.row(static_cast<Eigen::Index>(perm[i]));
            pos2[i] = pos[perm[i]];
        }
        EXPECT_NEAR(contrastive_loss(P2, A, pos2, 0.2, true).loss, r.loss, 1e-9);

        // loss(sims, tau * c) == loss(sims / c, tau).
        Matrix sims(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) sims(i, j) = std::uniform_real_distribution<double>(-1, 1)(rng);
        }
        const double c = 0.5 + static_cast<double>(rng() % 100) / 25.0;
        EXPECT_NEAR(contrastive_loss_from_similarities(sims, pos, 0.1 * c, true).loss,
                    contrastive_loss_from_similarities(sims / c, pos, 0.1, true).loss, 1e-9);
    }
    // Near-zero loss when each softmax concentrates on its positive.
    const Matrix I = Matrix::Identity(4, 4);
    const std::size_t ident[] = {0, 1, 2, 3};
    EXPECT_LT(contrastive_loss(I, I, ident, 0.01, true).loss, 1e-12);
}

TEST(ContrastiveLoss, RejectsBadInput) {
    const Matrix m = Matrix::Identity(3, 3);
    const std::size_t dup[] = {0, 0, 1};
    EXPECT_THROW(contrastive_loss(m, m, dup, 0.1, true), ValidationError);
    const std::size_t ok[] = {0, 1, 2};
    EXPECT_THROW(contrastive_loss(m, m, ok, 0.0, true), ValidationError);
    EXPECT_NO_THROW(contrastive_loss(m, m, dup, 0.1, false));
}

namespace {

struct Planted {
    EmbeddingStore store{16};
    std::vector<TrainingPair> pairs;
};

Planted planted(std::uint64_t seed) {
    Planted p;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<Attribute> attrs;
    for (int j = 0; j < 6; ++j) {
        attrs.push_back({"color", "c" + std::to_string(j)});
        std::vector<double> v(16);
        for (auto& x : v) x = n(rng);
        p.store.insert(attrs.back().text(), EmbeddingVector(v));
    }
    for (int i = 0; i < 60; ++i) {
        const std::string id = "p" + std::to_string(i);
        const auto& a = attrs[static_cast<std::size_t>(i) % attrs.size()];
        Vector base = p.store.at(a.text()).values();
        for (Eigen::Index k = 0; k < base.size(); ++k) base[k] += 0.8 * n(rng);
        p.store.insert(image_key(id), EmbeddingVector(base));
        if (i % 3 != 0) p.store.insert(text_key(id), EmbeddingVector(base));  // some products lack text
        p.pairs.emplace_back(id, a);
    }
    return p;
}

}  // namespace

TEST(TrainProjection, ZeroLearningRateKeepsInitialization) {
    const auto data = planted(1);
    TrainerConfig cfg;
    cfg.learning_rate = 0.0;
    cfg.batch_size = 8;
    EXPECT_EQ(train_projection(data.store, data.pairs, cfg), initial_head(16, cfg));
    cfg.dimension = 8;
    EXPECT_EQ(train_projection(data.store, data.pairs, cfg), initial_head(16, cfg));
}

TEST(TrainProjection, DeterministicAndLossDecreases) {
    const auto data = planted(2);
    TrainerConfig cfg;
    cfg.batch_size = 8;
    cfg.epochs = 8;
    cfg.learning_rate = 0.05;
    cfg.momentum = 0.5;
    TrainingReport r1, r2;
    const auto h1 = train_projection(data.store, data.pairs, cfg, &r1);
    const auto h2 = train_projection(data.store, data.pairs, cfg, &r2);
    EXPECT_EQ(h1, h2);
    EXPECT_EQ(r1.epoch_losses, r2.epoch_losses);
    ASSERT_EQ(r1.epoch_losses.size(), 8u);
    EXPECT_LE(r1.epoch_losses.back(), r1.epoch_losses.front());
    EXPECT_EQ(r1.pairs, 60u);
}

TEST(TrainProjection, ErrorsAndDivergence) {
    const auto data = planted(3);
    TrainerConfig cfg;
    cfg.batch_size = 8;
    std::vector<TrainingPair> single(data.pairs.begin(), data.pairs.begin() + 1);
    single.push_back(single.front());
    EXPECT_THROW(train_projection(data.store, single, cfg), ValidationError);
    std::vector<TrainingPair> missing = data.pairs;
    missing.emplace_back("ghost", Attribute{"color", "c0"});
    EXPECT_THROW(train_projection(data.store, missing, cfg), ValidationError);

    cfg.learning_rate = std::numeric_limits<double>::max();
    try {
        train_projection(data.store, data.pairs, cfg);
        FAIL() << "expected divergence";
    } catch (const TrainingDivergedError& e) {
        EXPECT_NE(std::string(e.what()).find("learning rate"), std::string::npos);
    }
    TrainerConfig bad;
    bad.temperature = 0.0;
    EXPECT_THROW(bad.validate(), ValidationError);
    bad = {};
    bad.batch_size = 1;
    EXPECT_THROW(bad.validate(), ValidationError);
}

TEST(EmbeddingFiles, RoundTrip) {
    testutil::TempDir dir;
    EmbeddingStore s(3);
    s.insert("color:red", vec({0.1, 0.2, 1.0 / 3.0}));
    s.insert(image_key("p1"), vec({-1e-300, 2.5, 7.0}));
    const auto path = testutil::write(dir / "emb.jsonl", serialize_embeddings(s));
    const auto loaded = load_embeddings(path);
    EXPECT_EQ(loaded.dimension(), 3u);
    EXPECT_EQ(loaded.entries(), s.entries());
    EXPECT_THROW(s.insert("x", vec({1, 2})), ValidationError);

    const auto bad = testutil::write(dir / "bad.jsonl", "{\"dimension\": 2}\n{\"key\": \"a\", \"vector\": [1]}\n");
    EXPECT_THROW(load_embeddings(bad), Error);
}

TEST(ProjectionHeadFile, RoundTripAndValidation) {
    TrainerConfig cfg;
    cfg.dimension = 3;
    cfg.seed = 9;
    const auto head = initial_head(5, cfg);
    EXPECT_EQ(head.base_dimension(), 5u);
    EXPECT_EQ(head.dimension(), 3u);
    // Orthonormal columns.
    EXPECT_LT((head.image.transpose() * head.image - Matrix::Identity(3, 3)).norm(), 1e-12);
    const auto back = head_from_json(nlohmann::json::parse(to_json(head).dump()));
    EXPECT_EQ(back, head);

    auto j = to_json(head);
    j["image"][0] = "x";
    EXPECT_THROW(head_from_json(j), Error);
    ProjectionHead broken = head;
    broken.text = Matrix::Zero(2, 2);
    EXPECT_THROW(broken.validate(), ValidationError);
}

TEST(ProductEmbedding, MissingModalities) {
    const auto head = identity_head(2);
    const auto img = vec({1, 0});
    const auto txt = vec({0, 1});
    EXPECT_EQ(product_embedding(head, &img, nullptr), img);
    EXPECT_EQ(product_embedding(head, nullptr, &txt), txt);
    EXPECT_NEAR(product_embedding(head, &img, &txt)[0], 1.0 / std::sqrt(2.0), 1e-15);
    EXPECT_THROW(product_embedding(head, nullptr, nullptr), ValidationError);
}
