#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "talkrf/nn.hpp"
#include "talkrf/optim.hpp"

namespace talkrf {

enum class DType { F64, F32 };

/// Versioned tensor container: "TRFC" magic, u32 version, u64 manifest length,
/// a JSON manifest (name, shape, dtype, byte offset per tensor plus free-form
/// metadata), zero padding to an 8-byte boundary, then little-endian raw values.
/// Used for checkpoints, feature files, and pose files.
class Container {
 public:
  static constexpr std::uint32_t kVersion = 1;

  struct Record {
    Shape shape;
    DType dtype = DType::F64;
    std::vector<double> values;
  };

  nlohmann::json metadata = nlohmann::json::object();

  void put(const std::string& name, Shape shape, std::vector<double> values,
           DType dtype = DType::F64);
  void put(const std::string& name, const Tensor& t, DType dtype = DType::F64) {
    put(name, t.shape(), std::vector<double>(t.values().begin(), t.values().end()), dtype);
  }
  bool has(const std::string& name) const { return records_.count(name) != 0; }
  const Record& get(const std::string& name) const;
  Tensor tensor(const std::string& name) const;
  const std::map<std::string, Record>& records() const { return records_; }

  void save(const std::filesystem::path& path) const;
  static Container load(const std::filesystem::path& path);

 private:
  std::map<std::string, Record> records_;
};

/// Parameters, buffers, and (optionally) Adam state of one model.
Container checkpoint_container(const ParamStore& params, const Adam* optimizer,
                               const nlohmann::json& metadata = nlohmann::json::object());
void save_checkpoint(const std::filesystem::path& path, const ParamStore& params,
                     const Adam* optimizer, const nlohmann::json& metadata = nlohmann::json::object());
/// Restores values in place; names and shapes must match exactly. Returns the metadata.
nlohmann::json load_checkpoint(const std::filesystem::path& path, ParamStore& params,
                               Adam* optimizer = nullptr);
nlohmann::json restore_checkpoint(const Container& c, ParamStore& params, Adam* optimizer = nullptr);

}  // namespace talkrf
