#pragma once

#include <fstream>
#include <map>
#include <string>

#include <json.hpp>

#include "bladca/errors.hpp"
#include "bladca/hashing.hpp"
#include "bladca/version.hpp"

namespace bladca {

/// Pipeline manifest: one entry per executed stage with content hashes of its
/// inputs and outputs, the seed and a config snapshot. Re-running a stage on
/// identical inputs must reproduce identical output hashes.
class PipelineManifest {
public:
  static PipelineManifest load_or_create(const std::string& path) {
    PipelineManifest m;
    m.path_ = path;
    std::ifstream in(path);
    if (in) {
      try {
        m.doc_ = nlohmann::json::parse(in);
      } catch (const nlohmann::json::exception& e) {
        throw ValidationError("manifest " + path + ": " + e.what());
      }
    } else {
      m.doc_ = nlohmann::json::object();
      m.doc_["tool_version"] = version_string;
      m.doc_["stages"] = nlohmann::json::array();
    }
    return m;
  }

  void add_stage(const std::string& stage, std::uint64_t seed,
                 const std::map<std::string, std::string>& inputs,
                 const std::map<std::string, std::string>& outputs,
                 const nlohmann::json& config) {
    nlohmann::json e;
    e["stage"] = stage;
    e["seed"] = seed;
    e["config"] = config;
    e["inputs"] = nlohmann::json::object();
    for (const auto& [p, h] : inputs) e["inputs"][p] = h;
    e["outputs"] = nlohmann::json::object();
    for (const auto& [p, h] : outputs) e["outputs"][p] = h;
    doc_["stages"].push_back(e);
  }

  void save() const {
    std::ofstream out(path_);
    if (!out) throw ValidationError("cannot write manifest: " + path_);
    out << doc_.dump(2) << "\n";
  }

  const nlohmann::json& json() const { return doc_; }

private:
  std::string path_;
  nlohmann::json doc_;
};

} // namespace bladca
