#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "nerform/check.hpp"
#include "nerform/tape.hpp"
#include "nerform/tensor.hpp"

namespace nf {

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Named parameter tensors plus Adam first/second-moment state.  Iteration is
// always in name order (std::map), which keeps optimizer updates and
// checkpoint bytes deterministic.
class ParamStore {
 public:
  Tensor& create(const std::string& name, Tensor init) {
    NF_CHECK(!params_.count(name), "parameter '" << name << "' already exists");
    return params_[name] = std::move(init);
  }

  bool contains(const std::string& name) const { return params_.count(name) > 0; }

  Tensor& get(const std::string& name) {
    auto it = params_.find(name);
    NF_CHECK(it != params_.end(), "unknown parameter '" << name << "'");
    return it->second;
  }
  const Tensor& get(const std::string& name) const {
    auto it = params_.find(name);
    NF_CHECK(it != params_.end(), "unknown parameter '" << name << "'");
    return it->second;
  }

  const std::map<std::string, Tensor>& all() const { return params_; }
  i64 step_count() const { return t_; }

  // One Adam update with bias correction.  Parameters without a gradient
  // entry are left untouched (their moments too).
  void adam_step(const std::map<std::string, Tensor>& grads, const AdamConfig& cfg) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(t_));
    for (const auto& [name, g] : grads) {
      Tensor& p = get(name);
      NF_CHECK(g.numel() == p.numel(),
               "gradient numel mismatch for '" << name << "'");
      Tensor& m = moment(m_, name, p.shape);
      Tensor& v = moment(v_, name, p.shape);
      const i64 nel = p.numel();
      double* pp = p.ptr();
      double* mp = m.ptr();
      double* vp = v.ptr();
      const double* gp = g.ptr();
      for (i64 i = 0; i < nel; ++i) {
        mp[i] = cfg.beta1 * mp[i] + (1.0 - cfg.beta1) * gp[i];
        vp[i] = cfg.beta2 * vp[i] + (1.0 - cfg.beta2) * gp[i] * gp[i];
        const double mhat = mp[i] / bc1;
        const double vhat = vp[i] / bc2;
        pp[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
      }
    }
  }

  // Binary checkpoint: magic "NFCK", u32 version, then one record per
  // parameter: u32 name length, name bytes, u32 rank, u64 extents,
  // little-endian f64 payload.  Records are written in name order.
  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    NF_CHECK(out.good(), "cannot open '" << path.string() << "' for writing");
    out.write("NFCK", 4);
    write_u32(out, 1);
    for (const auto& [name, t] : params_) {
      write_u32(out, std::uint32_t(name.size()));
      out.write(name.data(), std::streamsize(name.size()));
      write_u32(out, std::uint32_t(t.shape.rank));
      for (int i = 0; i < t.shape.rank; ++i) write_u64(out, std::uint64_t(t.shape[i]));
      out.write(reinterpret_cast<const char*>(t.ptr()),
                std::streamsize(t.numel() * i64(sizeof(double))));
    }
    NF_CHECK(out.good(), "write failed for '" << path.string() << "'");
  }

  static ParamStore load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    NF_CHECK(in.good(), "cannot open checkpoint '" << path.string() << "'");
    char magic[4];
    in.read(magic, 4);
    NF_CHECK(in.good() && std::memcmp(magic, "NFCK", 4) == 0,
             "'" << path.string() << "' is not a parameter checkpoint");
    const std::uint32_t version = read_u32(in);
    NF_CHECK(version == 1, "unsupported checkpoint version " << version);
    ParamStore store;
    for (;;) {
      std::uint32_t name_len;
      if (!in.read(reinterpret_cast<char*>(&name_len), 4)) break;  // clean EOF
      std::string name(name_len, '\0');
      in.read(name.data(), std::streamsize(name_len));
      const std::uint32_t rank = read_u32(in);
      NF_CHECK(in.good() && rank <= 4, "corrupt checkpoint record '" << name << "'");
      Shape s;
      s.rank = int(rank);
      for (std::uint32_t i = 0; i < rank; ++i) s.dim[i] = i64(read_u64(in));
      Tensor t(s);
      in.read(reinterpret_cast<char*>(t.ptr()),
              std::streamsize(t.numel() * i64(sizeof(double))));
      NF_CHECK(in.good(), "truncated checkpoint payload for '" << name << "'");
      store.create(name, std::move(t));
    }
    return store;
  }

 private:
  std::map<std::string, Tensor> params_;
  std::map<std::string, Tensor> m_, v_;
  i64 t_ = 0;

  static Tensor& moment(std::map<std::string, Tensor>& mp, const std::string& name,
                        const Shape& s) {
    auto it = mp.find(name);
    if (it == mp.end()) it = mp.emplace(name, Tensor::zeros(s)).first;
    return it->second;
  }

  static void write_u32(std::ofstream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), 4);
  }
  static void write_u64(std::ofstream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), 8);
  }
  static std::uint32_t read_u32(std::ifstream& in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    return v;
  }
  static std::uint64_t read_u64(std::ifstream& in) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 8);
    return v;
  }
};

// Lazily mirrors ParamStore tensors as gradient-bearing leaves on one tape.
// Leaf values share the parameter buffers, so no copies are made; after
// backward, collect_grads() returns the accumulated gradients by name.
class TapeParams {
 public:
  TapeParams(Tape& tape, ParamStore& store) : tape_(&tape), store_(&store) {}

  Var operator[](const std::string& name) {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    Var v = tape_->leaf(store_->get(name), true);
    vars_.emplace(name, v);
    return v;
  }

  std::map<std::string, Tensor> collect_grads() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, v] : vars_) out.emplace(name, tape_->grad(v));
    return out;
  }

  const std::map<std::string, Var>& vars() const { return vars_; }

 private:
  Tape* tape_;
  ParamStore* store_;
  std::map<std::string, Var> vars_;
};

// Accumulates per-chunk gradient maps in a fixed order.
inline void add_grads(std::map<std::string, Tensor>& into,
                      const std::map<std::string, Tensor>& from) {
  for (const auto& [name, g] : from) {
    auto it = into.find(name);
    if (it == into.end()) {
      into.emplace(name, g.clone());
    } else {
      NF_CHECK(it->second.numel() == g.numel(), "gradient shape drift for '" << name << "'");
      detail::emap(it->second) += detail::emap(g);
    }
  }
}

}  // namespace nf
