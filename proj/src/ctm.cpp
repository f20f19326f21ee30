#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "autocirc/error.hpp"
#include "autocirc/io.hpp"
#include "autocirc/model.hpp"

// CTM layout: u64 LE manifest length, UTF-8 JSON manifest, then the payload of
// little-endian f32 values. Tensor offsets and lengths are in bytes from the
// payload start.

namespace autocirc {

static_assert(std::endian::native == std::endian::little, "CTM I/O assumes a little-endian host");

namespace {

std::uint64_t read_u64_le(const std::string& bytes) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(bytes[static_cast<std::size_t>(i)]);
  return v;
}

void append_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

}  // namespace

void save_model(const Model& model, const std::filesystem::path& path) {
  Json tensors = Json::array();
  std::string payload;
  for (const auto& [name, shape] : required_weights(model.config())) {
    const num::Tensor& t = model.weight(name);
    const std::size_t offset = payload.size();
    for (double v : t.data()) {
      const float f = static_cast<float>(v);
      char buf[4];
      std::memcpy(buf, &f, 4);
      payload.append(buf, 4);
    }
    tensors.push_back({{"name", name}, {"shape", shape}, {"dtype", "f32"}, {"offset", offset},
                       {"length", payload.size() - offset}});
  }
  Json manifest = {{"format_version", 1}, {"config", config_to_json(model.config())}, {"tensors", tensors}};
  const std::string text = manifest.dump();
  std::string out;
  append_u64_le(out, text.size());
  out += text;
  out += payload;
  write_file(path, out);
}

Model load_model(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  require(bytes.size() >= 8, ErrorKind::kFormat, path.string() + ": truncated CTM header");
  const std::uint64_t mlen = read_u64_le(bytes);
  require(mlen <= bytes.size() - 8, ErrorKind::kFormat, path.string() + ": manifest length exceeds file size");
  Json manifest;
  try {
    manifest = Json::parse(bytes.substr(8, mlen));
  } catch (const std::exception& e) {
    fail(ErrorKind::kFormat, path.string() + ": manifest is not valid JSON");
  }
  require(manifest.is_object() && manifest.value("format_version", 0) == 1, ErrorKind::kFormat,
          path.string() + ": unsupported CTM format version");
  require(manifest.contains("config") && manifest.contains("tensors") && manifest["tensors"].is_array(),
          ErrorKind::kFormat, path.string() + ": manifest lacks config or tensors");
  const ModelConfig config = config_from_json(manifest["config"]);
  const std::string_view payload(bytes.data() + 8 + mlen, bytes.size() - 8 - mlen);

  std::map<std::string, num::Tensor> weights;
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  for (const Json& t : manifest["tensors"]) {
    const std::string name = t.value("name", "");
    require(!name.empty(), ErrorKind::kFormat, "tensor entry without a name");
    require(t.value("dtype", "") == "f32", ErrorKind::kFormat, "tensor " + name + ": dtype must be f32");
    num::Shape shape;
    try {
      shape = t.at("shape").get<num::Shape>();
    } catch (const std::exception&) {
      fail(ErrorKind::kFormat, "tensor " + name + ": bad shape");
    }
    const std::size_t offset = t.value("offset", std::size_t{0});
    const std::size_t length = t.value("length", std::size_t{0});
    require(length == 4 * num::shape_size(shape), ErrorKind::kFormat, "tensor " + name + ": length does not match shape");
    require(offset <= payload.size() && length <= payload.size() - offset, ErrorKind::kFormat,
            "tensor " + name + ": data lies outside the payload");
    ranges.emplace_back(offset, offset + length);
    std::vector<double> data(num::shape_size(shape));
    for (std::size_t i = 0; i < data.size(); ++i) {
      float f;
      std::memcpy(&f, payload.data() + offset + 4 * i, 4);
      data[i] = f;
    }
    require(weights.emplace(name, num::Tensor(shape, std::move(data))).second, ErrorKind::kFormat,
            "tensor " + name + " listed twice");
  }
  std::sort(ranges.begin(), ranges.end());
  for (std::size_t i = 1; i < ranges.size(); ++i) {
    require(ranges[i].first >= ranges[i - 1].second, ErrorKind::kFormat, path.string() + ": tensor data overlaps");
  }
  return Model(config, std::move(weights));
}

}  // namespace autocirc
