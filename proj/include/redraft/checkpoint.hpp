#pragma once

// Parameter checkpoint file: a leading magic string, one meta line, then one
// entry per parameter with its name, shape, and row-major values. Values are
// printed with %.17g so doubles round-trip exactly.

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "redraft/tensor.hpp"
#include "redraft/util.hpp"

namespace redraft {

inline constexpr const char* kCheckpointMagic = "REDRAFT-CKPT v1";

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// meta: free-form key=value pairs (backbone, hidden size, vocab hash, ...)
inline void save_checkpoint(const std::string& path, const ParamRegistry& params,
                            const std::map<std::string, std::string>& meta) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out << kCheckpointMagic << "\n";
  out << "meta";
  for (const auto& [k, v] : meta) out << " " << k << "=" << v;
  out << "\n";
  for (const auto& [name, t] : params.items) {
    out << name << " " << t.shape().size();
    for (int d : t.shape()) out << " " << d;
    for (double v : t.value()) out << " " << format_double(v);
    out << "\n";
  }
  if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

struct LoadedCheckpoint {
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Tensor>> params;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : params)
      if (n == name) return &t;
    return nullptr;
  }
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  std::string line;
  if (!std::getline(in, line) || trim(line) != kCheckpointMagic)
    throw std::runtime_error("not a checkpoint file (bad magic): " + path);

  LoadedCheckpoint ckpt;
  if (!std::getline(in, line)) throw std::runtime_error("checkpoint missing meta line: " + path);
  {
    std::istringstream is(line);
    std::string tag;
    is >> tag;
    if (tag != "meta") throw std::runtime_error("checkpoint missing meta line: " + path);
    std::string kv;
    while (is >> kv) {
      auto eq = kv.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error("malformed checkpoint meta entry: " + kv);
      ckpt.meta[kv.substr(0, eq)] = kv.substr(eq + 1);
    }
  }

  int lineno = 2;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::istringstream is(line);
    std::string name;
    int rank = 0;
    if (!(is >> name >> rank) || rank < 1 || rank > 2)
      throw std::runtime_error("malformed checkpoint entry at line " + std::to_string(lineno));
    Shape shape(rank);
    for (int& d : shape)
      if (!(is >> d))
        throw std::runtime_error("malformed checkpoint shape at line " + std::to_string(lineno));
    std::vector<double> data(shape_numel(shape));
    for (double& v : data)
      if (!(is >> v))
        throw std::runtime_error("truncated checkpoint values at line " + std::to_string(lineno));
    ckpt.params.emplace_back(name, Tensor::from(std::move(shape), std::move(data)));
  }
  return ckpt;
}

// Copies loaded values into an existing registry; every registry parameter
// must be present with a matching shape.
inline void restore_params(ParamRegistry& params, const LoadedCheckpoint& ckpt) {
  for (auto& [name, t] : params.items) {
    const Tensor* src = ckpt.find(name);
    if (!src) throw std::runtime_error("checkpoint missing parameter: " + name);
    if (!same_shape(src->shape(), t.shape()))
      throw std::runtime_error("checkpoint shape mismatch for parameter: " + name);
    t.value() = src->value();
  }
}

}  // namespace redraft
