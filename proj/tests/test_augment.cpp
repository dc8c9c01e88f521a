#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "crmatch/augment.hpp"
#include "crmatch/rng.hpp"

using namespace crmatch;

namespace {

Image random_image(uint64_t seed, int h = 32, int w = 32) {
    Rng rng(seed);
    Image img(h, w);
    for (auto& v : img.data) v = static_cast<float>(rng.uniform());
    return img;
}

bool in_range(const Image& img) {
    for (float v : img.data)
        if (!(v >= 0.0f && v <= 1.0f)) return false;
    return true;
}

} // namespace

TEST_CASE("splitmix64 reference outputs") {
    Rng r0(0);
    CHECK(r0.next_u64() == 0xE220A8397B1DCDAFULL);
    CHECK(r0.next_u64() == 0x6E789E6AA1B965F4ULL);
    CHECK(r0.next_u64() == 0x06C45D188009454FULL);
    Rng r42(42);
    CHECK(r42.next_u64() == 0xBDD732262FEB6E95ULL);
    CHECK(Rng(42).uniform() == doctest::Approx(0.7415648787718233).epsilon(1e-15));
}

TEST_CASE("rng substreams are pure functions of seed and tags") {
    Rng base(7);
    Rng a = base.stream({1, 2});
    Rng b = base.stream({1, 2});
    CHECK(a.next_u64() == b.next_u64());
    CHECK(base.state() == 7); // stream() does not advance the parent
    CHECK(Rng(7).stream({1, 2}).next_u64() != Rng(7).stream({2, 1}).next_u64());
    CHECK(Rng(7).stream({1}).next_u64() != Rng(8).stream({1}).next_u64());
}

TEST_CASE("transform table matches the strong-augmentation list") {
    const auto& table = strong_transform_table();
    REQUIRE(table.size() == 14);
    auto range_of = [&](TransformKind k) {
        const auto& s = transform_spec(k);
        return std::make_pair(s.lo, s.hi);
    };
    CHECK(range_of(TransformKind::Rotate) == std::make_pair(-30.0f, 30.0f));
    CHECK(range_of(TransformKind::Posterize) == std::make_pair(4.0f, 8.0f));
    CHECK(range_of(TransformKind::ShearX) == std::make_pair(-0.3f, 0.3f));
    CHECK(range_of(TransformKind::ShearY) == std::make_pair(-0.3f, 0.3f));
    CHECK(range_of(TransformKind::TranslateX) == std::make_pair(-0.3f, 0.3f));
    CHECK(range_of(TransformKind::TranslateY) == std::make_pair(-0.3f, 0.3f));
    CHECK(range_of(TransformKind::Solarize) == std::make_pair(0.0f, 1.0f));
    CHECK(range_of(TransformKind::Brightness) == std::make_pair(0.05f, 0.95f));
    CHECK(range_of(TransformKind::Color) == std::make_pair(0.05f, 0.95f));
    CHECK(range_of(TransformKind::Contrast) == std::make_pair(0.05f, 0.95f));
    CHECK(range_of(TransformKind::Sharpness) == std::make_pair(0.05f, 0.95f));
    CHECK(parse_transform("translate_x") == TransformKind::TranslateX);
    CHECK_THROWS_AS(parse_transform("zoom"), Error);
}

TEST_CASE("identity cases are byte-exact") {
    const Image img = random_image(3);
    auto same = [&](const Image& out) { return out.data == img.data; };
    CHECK(same(apply_transform(img, TransformKind::Identity, 0.5f)));
    CHECK(same(apply_transform(img, TransformKind::Posterize, 8.0f)));
    CHECK(same(apply_transform(img, TransformKind::Solarize, 1.0f)));
    CHECK(same(apply_transform(img, TransformKind::Rotate, 0.0f)));
    CHECK(same(apply_transform(img, TransformKind::ShearX, 0.0f)));
    CHECK(same(apply_transform(img, TransformKind::ShearY, 0.0f)));
    CHECK(same(apply_transform(img, TransformKind::TranslateX, 0.0f)));
    CHECK(same(apply_transform(img, TransformKind::TranslateY, 0.0f)));
}

TEST_CASE("brightness scales toward black") {
    const Image img = random_image(5);
    const Image out = apply_transform(img, TransformKind::Brightness, 0.05f);
    for (size_t i = 0; i < img.data.size(); ++i)
        CHECK(out.data[i] == doctest::Approx(0.05f * img.data[i]).epsilon(1e-6));
}

TEST_CASE("out-of-range magnitude names the transform") {
    const Image img = random_image(6);
    CHECK_THROWS_WITH_AS(apply_transform(img, TransformKind::Rotate, 45.0f),
                         doctest::Contains("rotate"), Error);
    CHECK_THROWS_WITH_AS(apply_transform(img, TransformKind::Brightness, 0.99f),
                         doctest::Contains("brightness"), Error);
}

TEST_CASE("translate_x shifts by round(magnitude * width) pixels") {
    Image img(32, 32, 0.0f);
    img.at(0, 7, 10) = 1.0f;
    img.at(1, 7, 10) = 1.0f;
    img.at(2, 7, 10) = 1.0f;
    const Image out = apply_transform(img, TransformKind::TranslateX, 0.25f);
    CHECK(out.at(0, 7, 18) == doctest::Approx(1.0f));
    CHECK(out.at(0, 7, 10) == doctest::Approx(0.0f));

    // brute-force shift oracle on a random image
    const Image rnd = random_image(11);
    const Image shifted = apply_transform(rnd, TransformKind::TranslateX, -0.125f);
    const int shift = -4;
    for (int y = 0; y < rnd.height; ++y)
        for (int x = 0; x < rnd.width; ++x) {
            const int sx = x - shift;
            const float expect = (sx >= 0 && sx < rnd.width) ? rnd.at(1, y, sx) : 0.0f;
            CHECK(shifted.at(1, y, x) == doctest::Approx(expect));
        }
}

TEST_CASE("range preservation across random transforms") {
    for (uint64_t seed = 0; seed < 200; ++seed) {
        Rng rng(seed);
        const Image img = random_image(seed + 1000);
        const Image out = strong_augment(img, rng);
        CHECK(in_range(out));
        CHECK(out.height == img.height);
        CHECK(out.width == img.width);
    }
}

TEST_CASE("weak augment with identity draws is the identity") {
    const Image img = random_image(21);
    WeakDraw draw;
    draw.flip = false;
    draw.crop_dy = 4; // pad = ceil(32/8) = 4 -> centered window
    draw.crop_dx = 4;
    CHECK(weak_augment_with(img, draw).data == img.data);
}

TEST_CASE("weak augment keeps constant images constant") {
    Image img(32, 32, 0.25f);
    Rng rng(5);
    const Image out = weak_augment(img, rng);
    for (float v : out.data) CHECK(v == doctest::Approx(0.25f));
}

TEST_CASE("weak and strong augment replay byte-identically") {
    const Image img = random_image(42);
    Rng r1(42), r2(42);
    CHECK(weak_augment(img, r1).data == weak_augment(img, r2).data);
    Rng s1(43), s2(43);
    CHECK(strong_augment(img, s1).data == strong_augment(img, s2).data);
}

TEST_CASE("strong augment with identity draws and no cutout is the identity") {
    const Image img = random_image(33);
    StrongDraw draw;
    draw.ops = {TransformKind::Identity, TransformKind::Identity};
    draw.magnitudes = {0.0f, 0.0f};
    draw.cut_cy = 0;
    draw.cut_cx = 0;
    CHECK(strong_augment_with(img, draw, /*cutout_side=*/0).data == img.data);
}

TEST_CASE("cutout fills a half-side gray square, clipped at borders") {
    const Image img = random_image(55);
    const Image out = cutout_at(img, 16, 16, 16);
    int changed = 0;
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x)
            if (out.at(0, y, x) == 0.5f && img.at(0, y, x) != 0.5f) ++changed;
    CHECK(out.at(0, 8, 8) == 0.5f);
    CHECK(out.at(0, 23, 23) == 0.5f);
    CHECK(out.at(0, 7, 7) == img.at(0, 7, 7));
    CHECK(changed <= 16 * 16);

    const Image corner = cutout_at(img, 0, 0, 16);
    CHECK(corner.at(0, 0, 0) == 0.5f);
    CHECK(corner.at(0, 7, 7) == 0.5f);
    CHECK(corner.at(0, 8, 8) == img.at(0, 8, 8)); // clipped, no wraparound
    CHECK(corner.at(0, 31, 31) == img.at(0, 31, 31));

    // area bound over random draws
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        const Image c = cutout(img, rng);
        int n = 0;
        for (size_t i = 0; i < c.data.size(); ++i)
            if (c.data[i] != img.data[i]) ++n;
        CHECK(n <= 3 * 16 * 16);
    }
}

TEST_CASE("rotate90 is an exact permutation with cyclic order 4") {
    const Image img = random_image(77);
    CHECK(rotate90(img, 0).data == img.data);

    // (row 0, col 0) lands at (row H-1, col 0) under a 90-degree CCW turn
    Image probe(8, 8, 0.0f);
    probe.at(0, 0, 0) = 1.0f;
    const Image turned = rotate90(probe, 1);
    CHECK(turned.at(0, 7, 0) == 1.0f);

    // brute-force index-permutation oracle for r=1
    const Image r1 = rotate90(img, 1);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            CHECK(r1.at(2, y, x) == img.at(2, x, img.height - 1 - y));

    Image four = img;
    for (int i = 0; i < 4; ++i) four = rotate90(four, 1);
    CHECK(four.data == img.data);

    // composition table: r=a then r=b equals r=(a+b) mod 4
    for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b)
            CHECK(rotate90(rotate90(img, a), b).data == rotate90(img, (a + b) % 4).data);

    Image rect(8, 16, 0.0f);
    CHECK_THROWS_AS(rotate90(rect, 1), Error);
    CHECK_THROWS_AS(rotate90(img, 4), Error);
}

TEST_CASE("posterize masks low bits through the 8-bit round trip") {
    const Image img = random_image(88);
    const Image out = apply_transform(img, TransformKind::Posterize, 4.0f);
    for (float v : out.data) {
        const int q = static_cast<int>(std::lround(v * 255.0f));
        CHECK((q & 0x0F) == 0);
    }
}

TEST_CASE("solarize inverts only pixels above the threshold") {
    Image img(4, 4, 0.0f);
    img.at(0, 0, 0) = 0.9f;
    img.at(0, 0, 1) = 0.1f;
    const Image out = apply_transform(img, TransformKind::Solarize, 0.5f);
    CHECK(out.at(0, 0, 0) ==
          doctest::Approx((255 - std::lround(0.9f * 255)) / 255.0f));
    CHECK(out.at(0, 0, 1) == 0.1f); // untouched pixels keep their exact value
}

TEST_CASE("autocontrast stretches to the full range") {
    Image img(8, 8, 0.4f);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) img.at(0, y, x) = 0.4f + 0.2f * ((y * 8 + x) % 2);
    const Image out = apply_transform(img, TransformKind::Autocontrast, 0.0f);
    float mn = 1.0f, mx = 0.0f;
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            mn = std::min(mn, out.at(0, y, x));
            mx = std::max(mx, out.at(0, y, x));
        }
    CHECK(mn == doctest::Approx(0.0f));
    CHECK(mx == doctest::Approx(1.0f));
    CHECK(in_range(out));
}

TEST_CASE("enhancement and geometry transforms keep the [0,1] range") {
    const Image img = random_image(99);
    CHECK(in_range(apply_transform(img, TransformKind::Equalize, 0.0f)));
    CHECK(in_range(apply_transform(img, TransformKind::Color, 0.05f)));
    CHECK(in_range(apply_transform(img, TransformKind::Contrast, 0.05f)));
    CHECK(in_range(apply_transform(img, TransformKind::Sharpness, 0.05f)));
    CHECK(in_range(apply_transform(img, TransformKind::Rotate, 17.3f)));
    CHECK(in_range(apply_transform(img, TransformKind::ShearX, -0.3f)));
}
