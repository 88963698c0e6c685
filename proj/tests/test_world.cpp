#include <gtest/gtest.h>

#include <cmath>

#include "sdlb/code_bank.hpp"
#include "sdlb/rng.hpp"
#include "sdlb/world.hpp"
#include "test_util.hpp"

using namespace sdlb;

namespace {

WorldConfig desk_config() {
    WorldConfig cfg;
    cfg.seed = 7;
    return cfg;
}

WorldConfig tiny_config() {
    WorldConfig cfg;
    cfg.seed = 11;
    cfg.tokens = 6;
    cfg.code_dim = 24;
    cfg.bits = 4;
    cfg.expr_classes = 3;
    cfg.z_dim = 4;
    cfg.psi_dim = 4;
    cfg.image = 16;
    cfg.blobs = 5;
    return cfg;
}

}  // namespace

TEST(World, FrozenAtCreation) {
    SynthWorld a(desk_config());
    SynthWorld b(desk_config());
    EXPECT_EQ(a.code_prototypes().data, b.code_prototypes().data);
    EXPECT_EQ(a.psi_prototypes().data, b.psi_prototypes().data);
    Rng r1(5), r2(5);
    Tensor z = Tensor::randn({a.config().z_dim}, r1);
    Tensor z2 = Tensor::randn({b.config().z_dim}, r2);
    AttributeLabel attrs{{1, 0, 1, 0, 1, 0}, 2};
    Tensor c1 = a.sample_canonical_code(z, attrs, r1);
    Tensor c2 = b.sample_canonical_code(z2, attrs, r2);
    EXPECT_EQ(c1.data, c2.data);
}

TEST(Codes, SameInputsGiveIdenticalCode) {
    SynthWorld w(desk_config());
    Rng rz(3);
    Tensor z = Tensor::randn({w.config().z_dim}, rz);
    AttributeLabel attrs{{0, 1, 1, 0, 0, 1}, 3};
    Rng r1(9), r2(9);
    Tensor a = w.sample_canonical_code(z, attrs, r1);
    Tensor b = w.sample_canonical_code(z, attrs, r2);
    EXPECT_EQ(a.data, b.data);
}

TEST(Codes, FlippingOneBitChangesOnlyItsBlock) {
    SynthWorld w(desk_config());
    Rng rz(4);
    Tensor z = Tensor::randn({w.config().z_dim}, rz);
    AttributeLabel attrs{{0, 0, 0, 0, 0, 0}, 1};
    AttributeLabel flipped = attrs;
    flipped.bits[2] = 1;
    Rng r1(21), r2(21);
    Tensor a = w.sample_canonical_code(z, attrs, r1);
    Tensor b = w.sample_canonical_code(z, flipped, r2);
    const double tol = 4.0 * w.config().code_noise;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool in_block = i >= w.bit_block_start(2) && i < w.bit_block_start(2) + 4;
        if (in_block) {
            EXPECT_GT(std::abs(a.data[i] - b.data[i]), 1.0) << "block coord " << i;
        } else {
            EXPECT_LT(std::abs(a.data[i] - b.data[i]), tol) << "coord " << i;
        }
    }
}

TEST(Codes, DecodeRoundTripOnTenThousandDraws) {
    SynthWorld w(desk_config());
    Rng rng(12);
    for (int i = 0; i < 10000; ++i) {
        AttributeLabel attrs = w.random_attrs(rng);
        Tensor z = Tensor::randn({w.config().z_dim}, rng);
        Tensor code = w.sample_canonical_code(z, attrs, rng);
        EXPECT_TRUE(w.decode_attributes(code) == attrs);
    }
}

TEST(Decode, ExactPrototypeGivesFullConfidence) {
    SynthWorld w(desk_config());
    const std::size_t D = w.config().code_dim;
    Tensor code = Tensor::zeros({w.config().tokens, D});
    const std::size_t cl = 2;
    for (std::size_t d = 0; d < D; ++d) code.data[D + d] = w.code_prototypes().at2(cl, d);
    AttributeLabel out;
    std::vector<double> conf;
    w.decode_attributes(code, out, conf);
    EXPECT_EQ(out.expr_class, cl);
    EXPECT_NEAR(conf[cl], 1.0, 1e-12);
}

TEST(Decode, AllZeroCodeGivesAllZeroBits) {
    SynthWorld w(desk_config());
    Tensor code = Tensor::zeros({w.config().tokens, w.config().code_dim});
    AttributeLabel out = w.decode_attributes(code);
    for (int b : out.bits) EXPECT_EQ(b, 0);
}

TEST(Decode, RobustUnderUniformPerturbation) {
    SynthWorld w(desk_config());
    Rng rng(31);
    int correct = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        AttributeLabel attrs = w.random_attrs(rng);
        Tensor z = Tensor::randn({w.config().z_dim}, rng);
        Tensor code = w.sample_canonical_code(z, attrs, rng);
        for (double& v : code.data) v += rng.uniform(-0.3, 0.3);
        AttributeLabel got = w.decode_attributes(code);
        bool bits_ok = true;
        for (std::size_t b = 0; b < attrs.bits.size(); ++b) {
            bits_ok = bits_ok && got.bits[b] == attrs.bits[b];
        }
        if (bits_ok) ++correct;
    }
    EXPECT_GE(static_cast<double>(correct) / n, 0.99);
}

TEST(Render, SymmetricCodeIsMirrorSymmetricAtFrontView) {
    SynthWorld w(desk_config());
    Rng rng(41);
    Tensor z = Tensor::randn({w.config().z_dim}, rng);
    AttributeLabel attrs = w.random_attrs(rng);
    Tensor code = w.symmetrize(w.sample_canonical_code(z, attrs, rng));
    WorldImage img = w.render(code, CameraPose{0.0, 0.0});
    const std::size_t H = w.config().image, W = w.config().image;
    double worst = 0.0;
    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
            worst = std::max(worst, std::abs(img.intensity.at2(y, x) - img.intensity.at2(y, W - 1 - x)));
        }
    }
    EXPECT_LT(worst, 1e-9);
}

TEST(Render, MirroredAzimuthsGiveMirrorImages) {
    SynthWorld w(desk_config());
    Rng rng(43);
    Tensor z = Tensor::randn({w.config().z_dim}, rng);
    Tensor code = w.symmetrize(w.sample_canonical_code(z, w.random_attrs(rng), rng));
    WorldImage pos = w.render(code, CameraPose{0.5, 0.0});
    WorldImage neg = w.render(code, CameraPose{-0.5, 0.0});
    const std::size_t H = w.config().image, W = w.config().image;
    double worst = 0.0;
    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
            worst = std::max(worst, std::abs(pos.intensity.at2(y, x) - neg.intensity.at2(y, W - 1 - x)));
            worst = std::max(worst, std::abs(pos.depth.at2(y, x) - neg.depth.at2(y, W - 1 - x)));
        }
    }
    EXPECT_LT(worst, 1e-9);
}

TEST(Render, IntensityInUnitIntervalEvenOffDistribution) {
    SynthWorld w(desk_config());
    Rng rng(47);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor code = Tensor::randn({w.config().tokens, w.config().code_dim}, rng, 2.0);
        WorldImage img = w.render(code, w.sample_pose(rng));
        for (double v : img.intensity.data) {
            EXPECT_GT(v, 0.0);
            EXPECT_LT(v, 1.0);
        }
        EXPECT_TRUE(img.depth.all_finite());
    }
}

TEST(Render, GradientMatchesFiniteDifferences) {
    SynthWorld w(tiny_config());
    Rng rng(53);
    Tensor z = Tensor::randn({w.config().z_dim}, rng);
    Param code("code", w.sample_canonical_code(z, w.random_attrs(rng), rng));
    const CameraPose pose{0.3, -0.1};
    // random pixel weights make the check sensitive to every pixel
    Tensor weights = Tensor::randn({2, w.config().image, w.config().image}, rng);

    auto build = sdlb::testing::loss_fn([&](Graph& g) {
        Value img = w.render_g(g, g.param(code), pose);
        return sum(mul(img, g.leaf(weights)));
    });
    auto res = sdlb::testing::check_gradients({&code}, build, 1e-5);
    EXPECT_LT(res.max_rel_err, 1e-4) << res.worst;
}

TEST(Pose, SampleBoundsAndFrontViews) {
    SynthWorld w(desk_config());
    Rng rng(57);
    int fronts = 0;
    double az_sum = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        CameraPose p = w.sample_pose(rng);
        EXPECT_LE(std::abs(p.azimuth), w.config().az_range);
        EXPECT_LE(std::abs(p.elevation), w.config().el_range);
        if (p.azimuth == 0.0 && p.elevation == 0.0) ++fronts;
        az_sum += p.azimuth;
    }
    // front prob 0.1
    EXPECT_NEAR(static_cast<double>(fronts) / n, 0.1, 0.01);
    // az mean within 3 sigma of 0 (uniform variance az_range^2/3 on 90% of draws)
    const double sigma = w.config().az_range / std::sqrt(3.0 * n);
    EXPECT_NEAR(az_sum / n, 0.0, 3.0 * sigma);
}

TEST(Pose, SeededDeterminism) {
    SynthWorld w(desk_config());
    Rng r1(5), r2(5);
    for (int i = 0; i < 100; ++i) {
        CameraPose a = w.sample_pose(r1);
        CameraPose b = w.sample_pose(r2);
        EXPECT_EQ(a.azimuth, b.azimuth);
        EXPECT_EQ(a.elevation, b.elevation);
    }
}

TEST(Pose, EncodingIsPureFunction) {
    CameraPose p{0.4, -0.2};
    Tensor e = p.encode();
    ASSERT_EQ(e.size(), 6u);
    EXPECT_DOUBLE_EQ(e.data[0], 0.4);
    EXPECT_DOUBLE_EQ(e.data[2], std::sin(0.4));
    EXPECT_DOUBLE_EQ(e.data[5], std::cos(-0.2));
}

TEST(Bank, RoundTripIsBitIdentical) {
    SynthWorld w(desk_config());
    Rng rng = derive_rng(w.config().seed, "bank");
    CodeBank bank = build_code_bank(w, 64, rng);
    const std::string path = ::testing::TempDir() + "/bank_roundtrip.sdcb";
    save_code_bank(path, bank);
    const std::string bytes1 = io::read_file(path);
    CodeBank back = load_code_bank(path);
    EXPECT_EQ(back.codes.data, bank.codes.data);
    EXPECT_EQ(back.mean.data, bank.mean.data);
    EXPECT_EQ(back.stddev.data, bank.stddev.data);
    EXPECT_EQ(back.world_seed, bank.world_seed);
    ASSERT_EQ(back.labels.size(), bank.labels.size());
    for (std::size_t i = 0; i < bank.labels.size(); ++i) {
        EXPECT_TRUE(back.labels[i] == bank.labels[i]);
    }
    save_code_bank(path, back);
    EXPECT_EQ(io::read_file(path), bytes1);
}

TEST(Bank, StandardizedStatsAreExact) {
    SynthWorld w(desk_config());
    Rng rng = derive_rng(w.config().seed, "bank");
    CodeBank bank = build_code_bank(w, 500, rng);
    const std::size_t n = bank.size();
    const std::size_t kd = w.code_size();
    std::vector<double> mean(kd, 0.0), var(kd, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        Tensor s = bank.standardize(bank.code(i));
        for (std::size_t j = 0; j < kd; ++j) mean[j] += s.data[j];
    }
    for (double& m : mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        Tensor s = bank.standardize(bank.code(i));
        for (std::size_t j = 0; j < kd; ++j) {
            var[j] += (s.data[j] - mean[j]) * (s.data[j] - mean[j]);
        }
    }
    for (std::size_t j = 0; j < kd; ++j) {
        EXPECT_LT(std::abs(mean[j]), 1e-12);
        EXPECT_NEAR(std::sqrt(var[j] / static_cast<double>(n)), 1.0, 1e-9);
    }
}

TEST(Bank, AttributeMarginalsNearHalf) {
    SynthWorld w(desk_config());
    Rng rng = derive_rng(w.config().seed, "bank");
    CodeBank bank = build_code_bank(w, 5000, rng);
    for (std::size_t b = 0; b < w.config().bits; ++b) {
        double s = 0.0;
        for (const AttributeLabel& l : bank.labels) s += l.bits[b];
        EXPECT_NEAR(s / static_cast<double>(bank.size()), 0.5, 0.02) << "bit " << b;
    }
}

TEST(Dataset, TextAlwaysContainsFamilyWords) {
    SynthWorld w(desk_config());
    Rng rng = derive_rng(w.config().seed, "bank");
    CodeBank bank = build_code_bank(w, 200, rng);
    Rng drng = derive_rng(w.config().seed, "dataset");
    auto records = make_paired_dataset(w, bank, drng);
    for (const PairedRecord& r : records) {
        for (std::size_t b = 0; b < w.config().bits; ++b) {
            bool found = false;
            for (std::size_t tok : r.text_tokens) {
                found = found || w.vocab().in_family(tok, b, r.attrs.bits[b]);
            }
            EXPECT_TRUE(found) << "record " << r.code_index << " bit " << b;
        }
    }
}

TEST(Dataset, PsiNearestPrototypeMatchesClass) {
    SynthWorld w(desk_config());
    Rng rng(77);
    for (int i = 0; i < 10000; ++i) {
        AttributeLabel attrs = w.random_attrs(rng);
        Tensor psi = w.psi_for(attrs, rng);
        EXPECT_EQ(w.nearest_psi_class(psi), attrs.expr_class);
    }
}

TEST(Dataset, RegenerationIsByteIdentical) {
    SynthWorld w(desk_config());
    Rng rng = derive_rng(w.config().seed, "bank");
    CodeBank bank = build_code_bank(w, 100, rng);
    const std::string p1 = ::testing::TempDir() + "/ds1.jsonl";
    const std::string p2 = ::testing::TempDir() + "/ds2.jsonl";
    Rng d1 = derive_rng(w.config().seed, "dataset");
    Rng d2 = derive_rng(w.config().seed, "dataset");
    save_paired_dataset(p1, make_paired_dataset(w, bank, d1), w.config().seed);
    save_paired_dataset(p2, make_paired_dataset(w, bank, d2), w.config().seed);
    EXPECT_EQ(io::read_file(p1), io::read_file(p2));
}

TEST(Dataset, LoadRecoversRecords) {
    SynthWorld w(desk_config());
    Rng rng = derive_rng(w.config().seed, "bank");
    CodeBank bank = build_code_bank(w, 50, rng);
    Rng drng = derive_rng(w.config().seed, "dataset");
    auto records = make_paired_dataset(w, bank, drng);
    const std::string path = ::testing::TempDir() + "/ds_load.jsonl";
    save_paired_dataset(path, records, w.config().seed);
    PairedDataset back = load_paired_dataset(path);
    EXPECT_EQ(back.world_seed, w.config().seed);
    ASSERT_EQ(back.records.size(), records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        EXPECT_EQ(back.records[i].code_index, records[i].code_index);
        EXPECT_EQ(back.records[i].text_tokens, records[i].text_tokens);
        EXPECT_EQ(back.records[i].psi.data, records[i].psi.data);
        EXPECT_TRUE(back.records[i].attrs == records[i].attrs);
    }
}

TEST(Vocab, TokenizeInvertsToText) {
    Vocabulary v(6);
    AttributeLabel attrs{{1, 0, 1, 1, 0, 0}, 0};
    auto tokens = v.canonical(attrs);
    EXPECT_EQ(v.tokenize(v.to_text(tokens)), tokens);
    EXPECT_THROW(v.id_of("nonexistentword"), std::invalid_argument);
}
