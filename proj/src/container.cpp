#include "talkrf/container.hpp"

#include "talkrf/detail/little_endian.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace talkrf {

namespace {

using detail::get_le;
using detail::put_le;

constexpr char kMagic[4] = {'T', 'R', 'F', 'C'};

std::size_t dtype_size(DType d) { return d == DType::F64 ? 8 : 4; }
const char* dtype_name(DType d) { return d == DType::F64 ? "f64" : "f32"; }

DType parse_dtype(const std::string& s) {
  if (s == "f64") return DType::F64;
  if (s == "f32") return DType::F32;
  throw std::runtime_error("container: unknown dtype " + s);
}

}  // namespace

void Container::put(const std::string& name, Shape shape, std::vector<double> values, DType dtype) {
  if (numel(shape) != values.size()) {
    throw ShapeError("container: record " + name + " shape " + to_string(shape) +
                     " does not match " + std::to_string(values.size()) + " values");
  }
  records_[name] = Record{std::move(shape), dtype, std::move(values)};
}

const Container::Record& Container::get(const std::string& name) const {
  auto it = records_.find(name);
  if (it == records_.end()) throw std::out_of_range("container: missing record " + name);
  return it->second;
}

Tensor Container::tensor(const std::string& name) const {
  const auto& r = get(name);
  return Tensor::from(r.shape, r.values);
}

void Container::save(const std::filesystem::path& path) const {
  nlohmann::json manifest;
  manifest["version"] = kVersion;
  manifest["metadata"] = metadata;
  manifest["tensors"] = nlohmann::json::array();
  std::string blob;
  for (const auto& [name, rec] : records_) {
    manifest["tensors"].push_back({{"name", name},
                                   {"shape", rec.shape},
                                   {"dtype", dtype_name(rec.dtype)},
                                   {"offset", blob.size()},
                                   {"count", rec.values.size()}});
    for (double v : rec.values) {
      if (rec.dtype == DType::F64) {
        put_le(blob, v);
      } else {
        put_le(blob, static_cast<float>(v));
      }
    }
  }
  const std::string text = manifest.dump();
  std::string header(kMagic, 4);
  put_le<std::uint32_t>(header, kVersion);
  put_le<std::uint64_t>(header, text.size());
  header += text;
  header.append((8 - header.size() % 8) % 8, '\0');

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("container: cannot write " + path.string());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw std::runtime_error("container: write failed for " + path.string());
}

Container Container::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("container: cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw std::runtime_error("container: bad magic in " + path.string());
  }
  const auto version = get_le<std::uint32_t>(bytes.data() + 4);
  if (version != kVersion) {
    throw std::runtime_error("container: unsupported version " + std::to_string(version));
  }
  const auto len = get_le<std::uint64_t>(bytes.data() + 8);
  if (16 + len > bytes.size()) throw std::runtime_error("container: truncated manifest");
  const auto manifest = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
  std::size_t data_start = 16 + len;
  data_start += (8 - data_start % 8) % 8;

  Container c;
  c.metadata = manifest.value("metadata", nlohmann::json::object());
  for (const auto& t : manifest.at("tensors")) {
    Record rec;
    rec.shape = t.at("shape").get<Shape>();
    rec.dtype = parse_dtype(t.at("dtype").get<std::string>());
    const auto count = t.at("count").get<std::size_t>();
    const auto offset = t.at("offset").get<std::size_t>();
    const std::size_t width = dtype_size(rec.dtype);
    if (count != numel(rec.shape) || data_start + offset + count * width > bytes.size()) {
      throw std::runtime_error("container: corrupt record " + t.at("name").get<std::string>());
    }
    rec.values.resize(count);
    const char* p = bytes.data() + data_start + offset;
    for (std::size_t i = 0; i < count; ++i) {
      rec.values[i] = rec.dtype == DType::F64 ? get_le<double>(p + i * 8)
                                              : static_cast<double>(get_le<float>(p + i * 4));
    }
    c.records_[t.at("name").get<std::string>()] = std::move(rec);
  }
  return c;
}

Container checkpoint_container(const ParamStore& params, const Adam* optimizer,
                               const nlohmann::json& metadata) {
  Container c;
  c.metadata = metadata;
  for (const auto& e : params.entries()) c.put("param/" + e.name, e.tensor);
  if (optimizer) {
    const auto& o = optimizer->options();
    c.metadata["adam"] = {{"steps", optimizer->steps()},
                          {"lr", o.lr},
                          {"beta1", o.beta1},
                          {"beta2", o.beta2},
                          {"eps", o.eps}};
    for (const auto& [name, mom] : optimizer->state()) {
      c.put("adam.m/" + name, {mom.m.size()}, mom.m);
      c.put("adam.v/" + name, {mom.v.size()}, mom.v);
    }
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const ParamStore& params,
                     const Adam* optimizer, const nlohmann::json& metadata) {
  checkpoint_container(params, optimizer, metadata).save(path);
}

nlohmann::json load_checkpoint(const std::filesystem::path& path, ParamStore& params,
                               Adam* optimizer) {
  return restore_checkpoint(Container::load(path), params, optimizer);
}

nlohmann::json restore_checkpoint(const Container& c, ParamStore& params, Adam* optimizer) {
  for (const auto& e : params.entries()) {
    const auto& rec = c.get("param/" + e.name);
    if (rec.shape != e.tensor.shape()) {
      throw ShapeError("checkpoint: " + e.name + " has shape " + to_string(rec.shape) +
                       ", model expects " + to_string(e.tensor.shape()));
    }
    Tensor t = e.tensor;
    auto dst = t.mutable_values();
    std::copy(rec.values.begin(), rec.values.end(), dst.begin());
  }
  if (optimizer && c.metadata.contains("adam")) {
    const auto& a = c.metadata.at("adam");
    auto& o = optimizer->options();
    o.lr = a.at("lr");
    o.beta1 = a.at("beta1");
    o.beta2 = a.at("beta2");
    o.eps = a.at("eps");
    std::map<std::string, Adam::Moments> state;
    for (const auto& [name, rec] : c.records()) {
      if (name.rfind("adam.m/", 0) == 0) {
        const std::string pname = name.substr(7);
        state[pname].m = rec.values;
        state[pname].v = c.get("adam.v/" + pname).values;
      }
    }
    optimizer->restore(a.at("steps").get<std::int64_t>(), std::move(state));
  }
  return c.metadata;
}

}  // namespace talkrf
