#pragma once

// Tensor bundles on disk: a directory with manifest.json plus one raw file
// per tensor, or a single safetensors-layout container (u64 header length,
// JSON header, data region).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "qstore/tensor.hpp"

namespace qstore {

namespace fs = std::filesystem;

enum class BundleFormat { Directory, SingleFile };

inline Bytes read_file(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::Io, "cannot open '" + path.string() + "'");
    in.seekg(0, std::ios::end);
    auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0, std::ios::beg);
    Bytes out(size);
    if (size)
        in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(size));
    require(static_cast<bool>(in), ErrorKind::Io, "failed reading '" + path.string() + "'");
    return out;
}

inline void write_file(const fs::path& path, ByteView data)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::Io, "cannot create '" + path.string() + "'");
    if (!data.empty())
        out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    out.close();
    require(static_cast<bool>(out), ErrorKind::Io, "failed writing '" + path.string() + "'");
}

inline void write_text_file(const fs::path& path, const std::string& text)
{
    write_file(path, ByteView(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

namespace detail {

inline nlohmann::json parse_json(std::string_view text, const std::string& what)
{
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Validation, "malformed " + what + ": " + e.what());
    }
}

inline Shape parse_shape(const nlohmann::json& j, const std::string& name)
{
    require(j.is_array(), ErrorKind::Validation, "tensor '" + name + "': shape must be an array");
    Shape shape;
    for (auto& d : j) {
        require(d.is_number_unsigned() && d.get<std::uint64_t>() > 0, ErrorKind::Validation,
                "tensor '" + name + "': dimensions must be positive integers");
        shape.push_back(d.get<std::uint64_t>());
    }
    return shape;
}

inline void check_length(const Tensor& t, std::uint64_t have)
{
    auto expect = byte_length(t.dtype, t.numel());
    require(have == expect, ErrorKind::Validation,
            "tensor '" + t.name + "': byte-length mismatch, shape " + shape_string(t.shape) + " needs " +
                std::to_string(expect) + " bytes but " + std::to_string(have) + " are stored");
}

}  // namespace detail

/// Parses a single-file container image held in memory.
inline ModelTensors parse_single_file(ByteView image)
{
    ByteReader r(image);
    require(image.size() >= 8, ErrorKind::Validation, "tensor container shorter than its header length field");
    auto header_len = r.u64();
    require(header_len <= r.remaining(), ErrorKind::Validation, "tensor container header length exceeds file size");
    auto header_bytes = r.bytes(static_cast<std::size_t>(header_len));
    auto header = detail::parse_json(
        std::string_view(reinterpret_cast<const char*>(header_bytes.data()), header_bytes.size()), "container header");
    require(header.is_object(), ErrorKind::Validation, "container header must be a JSON object");
    auto data = image.subspan(8 + header_len);

    std::vector<Tensor> tensors;
    for (auto& [name, entry] : header.items()) {
        if (name == "__metadata__")
            continue;
        require(entry.is_object() && entry.contains("dtype") && entry.contains("shape") &&
                    entry.contains("data_offsets"),
                ErrorKind::Validation, "tensor '" + name + "': header entry needs dtype, shape, data_offsets");
        Tensor t;
        t.name = name;
        t.dtype = parse_dtype(entry["dtype"].get<std::string>());
        t.shape = detail::parse_shape(entry["shape"], name);
        auto& off = entry["data_offsets"];
        require(off.is_array() && off.size() == 2, ErrorKind::Validation, "tensor '" + name + "': bad data_offsets");
        auto begin = off[0].get<std::uint64_t>();
        auto end = off[1].get<std::uint64_t>();
        require(begin <= end && end <= data.size(), ErrorKind::Validation,
                "tensor '" + name + "': data_offsets outside the data region");
        detail::check_length(t, end - begin);
        auto view = data.subspan(begin, end - begin);
        t.data.assign(view.begin(), view.end());
        tensors.push_back(std::move(t));
    }
    return ModelTensors(std::move(tensors));
}

inline Bytes serialize_single_file(const ModelTensors& model)
{
    nlohmann::json header = nlohmann::json::object();
    std::uint64_t offset = 0;
    for (auto& t : model) {
        t.validate();
        header[t.name] = {{"dtype", dtype_name(t.dtype)},
                          {"shape", t.shape},
                          {"data_offsets", {offset, offset + t.data.size()}}};
        offset += t.data.size();
    }
    auto text = header.dump();
    // Pad the header with spaces so the data region starts 8-byte aligned.
    while ((text.size() % 8) != 0)
        text.push_back(' ');

    Bytes out;
    out.reserve(8 + text.size() + offset);
    ByteWriter w(out);
    w.put_u64(text.size());
    w.put_string(text);
    for (auto& t : model)
        w.put_bytes(t.data);
    return out;
}

inline ModelTensors load_directory_bundle(const fs::path& dir)
{
    auto manifest_path = dir / "manifest.json";
    require(fs::exists(manifest_path), ErrorKind::Io, "missing '" + manifest_path.string() + "'");
    auto text = read_file(manifest_path);
    auto manifest = detail::parse_json(std::string_view(reinterpret_cast<const char*>(text.data()), text.size()),
                                       "bundle manifest");
    require(manifest.is_object() && manifest.contains("tensors") && manifest["tensors"].is_array(),
            ErrorKind::Validation, "bundle manifest needs a 'tensors' array");

    std::vector<Tensor> tensors;
    for (auto& entry : manifest["tensors"]) {
        require(entry.is_object() && entry.contains("name") && entry.contains("dtype") && entry.contains("shape") &&
                    entry.contains("file"),
                ErrorKind::Validation, "bundle manifest entry needs name, dtype, shape, file");
        Tensor t;
        t.name = entry["name"].get<std::string>();
        t.dtype = parse_dtype(entry["dtype"].get<std::string>());
        t.shape = detail::parse_shape(entry["shape"], t.name);
        t.data = read_file(dir / entry["file"].get<std::string>());
        detail::check_length(t, t.data.size());
        tensors.push_back(std::move(t));
    }
    return ModelTensors(std::move(tensors));
}

inline void store_directory_bundle(const ModelTensors& model, const fs::path& dir)
{
    std::error_code ec;
    fs::create_directories(dir, ec);
    require(!ec, ErrorKind::Io, "cannot create directory '" + dir.string() + "': " + ec.message());

    nlohmann::json entries = nlohmann::json::array();
    std::size_t index = 0;
    for (auto& t : model) {
        t.validate();
        char file[32];
        std::snprintf(file, sizeof file, "t%05zu.bin", index++);
        write_file(dir / file, t.data);
        entries.push_back({{"name", t.name}, {"dtype", dtype_name(t.dtype)}, {"shape", t.shape}, {"file", file}});
    }
    write_text_file(dir / "manifest.json", nlohmann::json{{"tensors", entries}}.dump(2) + "\n");
}

/// Loads either bundle form; a directory path selects the directory layout.
inline ModelTensors load_tensor_bundle(const fs::path& path)
{
    require(fs::exists(path), ErrorKind::Io, "no such bundle '" + path.string() + "'");
    if (fs::is_directory(path))
        return load_directory_bundle(path);
    return parse_single_file(read_file(path));
}

inline void store_tensor_bundle(const ModelTensors& model, const fs::path& path, BundleFormat format)
{
    if (format == BundleFormat::Directory) {
        store_directory_bundle(model, path);
        return;
    }
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
    }
    write_file(path, serialize_single_file(model));
}

}  // namespace qstore
