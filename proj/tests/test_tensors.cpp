#include "support.hpp"

using namespace qstore;
using namespace qstore::test;

TEST(Tensors, SingleTensorBytesPreserved)
{
    TempDir dir;
    Tensor w{"w", DType::FP16, {2, 2}, bytes_of({1, 2, 3, 4, 5, 6, 7, 8})};
    store_tensor_bundle(ModelTensors({w}), dir / "b", BundleFormat::Directory);
    auto loaded = load_tensor_bundle(dir / "b");
    ASSERT_EQ(loaded.size(), 1u);
    EXPECT_EQ(loaded.at("w"), w);
    EXPECT_EQ(loaded.at("w").data.size(), 8u);
}

TEST(Tensors, Fp16BitPatternSurvives)
{
    // 27.25 = 0 10011 1011010000
    EXPECT_EQ(float_to_half(DType::FP16, 27.25f), 0b0100111011010000);
    auto t = float_tensor("x", DType::FP16, {1}, {27.25f});
    EXPECT_EQ(t.data, bytes_of({0xD0, 0x4E}));

    TempDir dir;
    for (auto fmt : {BundleFormat::Directory, BundleFormat::SingleFile}) {
        auto path = dir / (fmt == BundleFormat::Directory ? "d" : "f.safetensors");
        store_tensor_bundle(ModelTensors({t}), path, fmt);
        auto back = load_tensor_bundle(path).at("x");
        EXPECT_EQ(back.data, bytes_of({0xD0, 0x4E}));
        EXPECT_EQ(element(back, 0), 27.25f);
    }
}

TEST(Tensors, ByteLengthMismatchRejected)
{
    TempDir dir;
    fs::create_directories(dir / "b");
    write_text_file(dir / "b" / "manifest.json",
                    R"({"tensors":[{"name":"m","dtype":"F16","shape":[3,3],"file":"m.bin"}]})");
    write_file(dir / "b" / "m.bin", Bytes(10, 0));
    try {
        load_tensor_bundle(dir / "b");
        FAIL() << "expected a length error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Validation);
        EXPECT_NE(std::string(e.what()).find("18"), std::string::npos);
    }

    Tensor bad{"m", DType::FP16, {3, 3}, Bytes(10, 0)};
    EXPECT_THROW(bad.validate(), Error);
}

TEST(Tensors, SingleFileLengthMismatchRejected)
{
    std::string header = R"({"m":{"dtype":"F16","shape":[3,3],"data_offsets":[0,10]}})";
    Bytes image;
    ByteWriter w(image);
    w.put_u64(header.size());
    w.put_string(header);
    w.put_bytes(Bytes(10, 0));
    EXPECT_THROW(parse_single_file(image), Error);
}

TEST(Tensors, RoundTripRandomModels)
{
    std::mt19937_64 rng(7);
    TempDir dir;
    for (int round = 0; round < 20; ++round) {
        std::vector<Tensor> ts;
        int n = 1 + static_cast<int>(rng() % 5);
        for (int i = 0; i < n; ++i) {
            auto dtype = dtype_from_code(static_cast<std::uint8_t>(rng() % 4));
            Shape shape;
            for (std::uint64_t d = 0, nd = 1 + rng() % 3; d < nd; ++d) shape.push_back(1 + rng() % 9);
            ts.push_back(random_bits_tensor("t" + std::to_string(i), dtype, shape, rng));
        }
        ModelTensors model(std::move(ts));
        auto d = dir / ("d" + std::to_string(round));
        auto f = dir / ("f" + std::to_string(round) + ".safetensors");
        store_tensor_bundle(model, d, BundleFormat::Directory);
        store_tensor_bundle(model, f, BundleFormat::SingleFile);
        EXPECT_EQ(load_tensor_bundle(d), model);
        EXPECT_EQ(load_tensor_bundle(f), model);
    }
}

TEST(Tensors, EmptyModel)
{
    TempDir dir;
    store_tensor_bundle(ModelTensors(), dir / "e", BundleFormat::Directory);
    store_tensor_bundle(ModelTensors(), dir / "e.safetensors", BundleFormat::SingleFile);
    EXPECT_EQ(load_tensor_bundle(dir / "e").size(), 0u);
    EXPECT_EQ(load_tensor_bundle(dir / "e.safetensors").size(), 0u);
}

TEST(Tensors, Int4SingleElementPadding)
{
    EXPECT_EQ(byte_length(DType::INT4_PACKED, 1), 1u);
    Tensor t{"q", DType::INT4_PACKED, {1, 1}, Bytes(1, 0)};
    int4_set(t.data, 0, -3);
    EXPECT_EQ(t.data[0] >> 4, 0);
    EXPECT_EQ(int4_get(t.data, 0), -3);

    TempDir dir;
    store_tensor_bundle(ModelTensors({t}), dir / "b", BundleFormat::Directory);
    auto back = load_tensor_bundle(dir / "b").at("q");
    EXPECT_EQ(back.data.size(), 1u);
    EXPECT_EQ(back.data[0] & 0xF0, 0);
}

TEST(Tensors, Int4NibbleOrder)
{
    Bytes b(1, 0);
    int4_set(b, 0, 1);   // low nibble: 9
    int4_set(b, 1, -8);  // high nibble: 0
    EXPECT_EQ(b[0], 0x09);
    int4_set(b, 1, 7);
    EXPECT_EQ(b[0], 0xF9);
}

TEST(Tensors, DuplicateNamesRejected)
{
    Tensor a{"a", DType::INT8, {1}, Bytes(1, 0)};
    EXPECT_THROW(ModelTensors({a, a}), Error);
}

TEST(Tensors, DtypeNames)
{
    for (auto d : {DType::FP16, DType::BF16, DType::INT8, DType::INT4_PACKED})
        EXPECT_EQ(parse_dtype(dtype_name(d)), d);
    EXPECT_EQ(parse_dtype("INT4_PACKED"), DType::INT4_PACKED);
    EXPECT_THROW(parse_dtype("F32"), Error);
}

TEST(Tensors, MetadataKeyIgnored)
{
    std::string header = R"({"__metadata__":{"k":"v"},"a":{"dtype":"I8","shape":[2],"data_offsets":[0,2]}})";
    Bytes image;
    ByteWriter w(image);
    w.put_u64(header.size());
    w.put_string(header);
    w.put_bytes(bytes_of({0xFF, 0x01}));
    auto m = parse_single_file(image);
    ASSERT_EQ(m.size(), 1u);
    EXPECT_EQ(m.at("a").data, bytes_of({0xFF, 0x01}));
}

TEST(Tensors, MissingBundleIsIoError)
{
    TempDir dir;
    try {
        load_tensor_bundle(dir / "nope");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Io);
    }
}
