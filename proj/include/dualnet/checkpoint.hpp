#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>

#include "dualnet/config.hpp"
#include "dualnet/memory.hpp"
#include "dualnet/model.hpp"
#include "json.hpp"

namespace dualnet {

inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline json tensor_to_json(const Tensor& t) { return {{"shape", t.shape()}, {"data", t.storage()}}; }

inline Tensor tensor_from_json(const json& j, const std::string& name) {
  try {
    return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<Scalar>>());
  } catch (const std::exception& e) {
    throw CheckpointError("tensor '" + name + "': " + e.what());
  }
}

}  // namespace detail

/// Model (de)serialisation. Values are written as shortest round-trip
/// decimals, so a save/load cycle is bit-exact.
class CheckpointAccess {
 public:
  static json save(DualNetModel& model) {
    json params = json::object();
    for (auto* p : model.all_parameters()) {
      if (params.contains(p->name)) throw CheckpointError("duplicate parameter name " + p->name);
      params[p->name] = detail::tensor_to_json(p->value);
    }
    json buffers = json::object();
    std::size_t i = 0;
    for (auto& [name, t] : model.buffers()) buffers[buffer_key(i++, name)] = detail::tensor_to_json(*t);
    const auto& reg = model.registry();
    return {{"format", "dualnet-checkpoint"},
            {"version", kCheckpointVersion},
            {"arch", to_json(model.arch())},
            {"use_fast", model.uses_fast()},
            {"seed", model.seed_},
            {"registry", {{"task_aware", reg.task_aware()}, {"tasks", reg.task_lists()}, {"shared", reg.shared()}}},
            {"parameters", params},
            {"buffers", buffers}};
  }

  static DualNetModel load(const json& j) {
    if (j.value("format", "") != "dualnet-checkpoint") throw CheckpointError("not a dualnet checkpoint");
    if (j.value("version", 0) != kCheckpointVersion)
      throw CheckpointError("unsupported checkpoint version " + j.value("version", json(0)).dump());
    ArchConfig arch;
    from_json_into(j.at("arch"), "arch", arch);
    const json& reg = j.at("registry");
    const bool task_aware = reg.at("task_aware").get<bool>();
    DualNetModel model(arch, j.at("use_fast").get<bool>(), task_aware, j.at("seed").get<std::uint64_t>());
    if (task_aware) {
      const auto tasks = reg.at("tasks").get<std::vector<std::vector<int>>>();
      for (std::size_t t = 0; t < tasks.size(); ++t) model.add_task(t, tasks[t]);
    } else {
      const auto shared = reg.at("shared").get<std::vector<int>>();
      if (!shared.empty()) model.observe_labels(shared);
    }
    const json& params = j.at("parameters");
    std::size_t matched = 0;
    for (auto* p : model.all_parameters()) {
      if (!params.contains(p->name)) throw CheckpointError("checkpoint lacks parameter " + p->name);
      Tensor t = detail::tensor_from_json(params.at(p->name), p->name);
      if (t.shape() != p->value.shape()) {
        throw CheckpointError("parameter " + p->name + " has shape " + to_string(t.shape()) + ", model expects " +
                              to_string(p->value.shape()));
      }
      p->value = std::move(t);
      p->zero_grad();
      ++matched;
    }
    if (matched != params.size()) throw CheckpointError("checkpoint has parameters the model does not");
    const json& buffers = j.at("buffers");
    std::size_t i = 0;
    for (auto& [name, t] : model.buffers()) {
      const std::string key = buffer_key(i++, name);
      if (!buffers.contains(key)) throw CheckpointError("checkpoint lacks buffer " + key);
      Tensor v = detail::tensor_from_json(buffers.at(key), key);
      if (v.shape() != t->shape()) throw CheckpointError("buffer " + key + " has the wrong shape");
      *t = std::move(v);
    }
    return model;
  }

 private:
  static std::string buffer_key(std::size_t i, const std::string& name) { return std::to_string(i) + "." + name; }
};

inline void save_checkpoint(DualNetModel& model, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out << CheckpointAccess::save(model).dump();
}

inline DualNetModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot read " + path.string());
  try {
    return CheckpointAccess::load(json::parse(in));
  } catch (const json::exception& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

/// Memory dump in the same container style, for run forensics.
inline json memory_to_json(const EpisodicMemory& memory) {
  json entries = json::array();
  for (const auto* e : memory.entries()) {
    json item{{"input", detail::tensor_to_json(e->input)}, {"label", e->label}};
    if (e->soft_logits) item["soft_logits"] = *e->soft_logits;
    if (e->task_id) item["task_id"] = *e->task_id;
    entries.push_back(std::move(item));
  }
  return {{"format", "dualnet-memory"},
          {"version", kCheckpointVersion},
          {"policy", memory.policy() == MemoryPolicy::ring ? "ring" : "reservoir"},
          {"capacity", memory.capacity()},
          {"seen", memory.seen()},
          {"entries", entries}};
}

}  // namespace dualnet
