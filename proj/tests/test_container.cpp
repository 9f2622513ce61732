#include "icr/container.hpp"
#include "icr/csv.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace icr;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("icr_container_" + name)).string();
}

ModelConfig small_config() {
    ModelConfig c;
    c.n_layers = 2;
    c.n_heads = 2;
    c.width = 8;
    c.vocab_size = 24;
    c.max_seq_len = 16;
    return c;
}

std::vector<char> read_all(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_all(const std::string& path, const std::vector<char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

ErrorKind kind_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    ADD_FAILURE() << "no error raised";
    return ErrorKind::input;
}

} // namespace

TEST(Weights, BinaryRoundedWeightsRoundTripBitExact) {
    BackboneWeights w = BackboneWeights::init(small_config(), 4);
    round_to_binary32(w);
    const std::string path = temp_path("w.icrw");
    save_weights(w, path, Json{{"note", "x"}});
    Json meta;
    const BackboneWeights v = load_weights(path, &meta);
    EXPECT_EQ(v.digest(), w.digest());
    EXPECT_EQ(v.config.digest(), w.config.digest());
    EXPECT_EQ(meta.at("note"), "x");
    EXPECT_EQ(meta.at("config_digest"), w.config.digest());
    std::filesystem::remove(path);
}

TEST(Weights, BadMagicVersionAndTrailingBytesAreFormatErrors) {
    BackboneWeights w = BackboneWeights::init(small_config(), 5);
    const std::string path = temp_path("bad.icrw");
    save_weights(w, path);
    const std::vector<char> good = read_all(path);

    std::vector<char> b = good;
    b[0] = 'X';
    write_all(path, b);
    EXPECT_EQ(kind_of([&] { load_weights(path); }), ErrorKind::format);

    b = good;
    b[7] = 9; // version word follows the 7-byte magic
    write_all(path, b);
    EXPECT_EQ(kind_of([&] { load_weights(path); }), ErrorKind::format);

    b = good;
    b.push_back('\0');
    write_all(path, b);
    EXPECT_EQ(kind_of([&] { load_weights(path); }), ErrorKind::format);

    b.assign(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(good.size() / 2));
    write_all(path, b);
    EXPECT_EQ(kind_of([&] { load_weights(path); }), ErrorKind::format);

    std::filesystem::remove(path);
    EXPECT_EQ(kind_of([&] { load_weights(path); }), ErrorKind::io);
}

TEST(Binary, PrimitivesRoundTrip) {
    const std::string path = temp_path("prim.bin");
    Matrix m(2, 3);
    m << 1.5, -2.25, 3.0, 0.1, 1e-3, -7.0;
    {
        BinaryWriter w(accum_magic);
        w.u8(7);
        w.u32(123456);
        w.u64(0xFFFF0000FFFFull);
        w.f64(0.1);
        w.matrix_f64(m);
        w.string("hello");
        w.json(Json{{"a", 1}});
        w.commit(path);
    }
    BinaryReader r(path, accum_magic);
    EXPECT_EQ(r.u8(), 7);
    EXPECT_EQ(r.u32(), 123456u);
    EXPECT_EQ(r.u64(), 0xFFFF0000FFFFull);
    EXPECT_EQ(r.f64(), 0.1);
    EXPECT_TRUE(r.matrix_f64(2, 3) == m);
    EXPECT_EQ(r.string(), "hello");
    EXPECT_EQ(r.json().at("a"), 1);
    EXPECT_TRUE(r.at_end());
    EXPECT_EQ(kind_of([&] { BinaryReader(path, pid_magic); }), ErrorKind::format);
    std::filesystem::remove(path);
}

TEST(Config, JsonRoundTripPreservesDigest) {
    ModelConfig c = small_config();
    c.intervened_layers = {0, 1};
    EXPECT_EQ(config_from_json(config_to_json(c)).digest(), c.digest());
    Json j = config_to_json(c);
    j["width"] = 7; // not divisible by the head count
    EXPECT_THROW(config_from_json(j), Error);
}

TEST(Csv, SixSignificantDigitsAndReadBack) {
    CsvTable t({"name", "n", "x"});
    t.row("a", 3, 0.5);
    t.row("b", -1, 1.0 / 3.0);
    EXPECT_EQ(t.str(), "name,n,x\na,3,0.5\nb,-1,0.333333\n");
    EXPECT_THROW(t.row("c", 1), Error);
    EXPECT_EQ(fmt6(-0.0), "0");
    EXPECT_EQ(fmt6(1234567.0), "1.23457e+06");
    const std::string path = temp_path("t.csv");
    t.write(path);
    const auto rows = read_csv(path);
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows[2], (std::vector<std::string>{"b", "-1", "0.333333"}));
    std::filesystem::remove(path);
}
