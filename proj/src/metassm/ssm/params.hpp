#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "metassm/nd/tape.hpp"
#include "metassm/nd/tensor.hpp"
#include "metassm/util/rng.hpp"

namespace metassm {

/// Ordered, named collection of trainable tensors with matching gradient
/// buffers. Registration order is the canonical iteration order for the
/// optimizer and the checkpoint, which keeps runs deterministic.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    Tensor grad;
  };

  std::int32_t add(const std::string& name, Tensor init);
  bool has(const std::string& name) const { return by_name_.count(name) > 0; }
  std::int32_t id(const std::string& name) const;

  Tensor& value(std::int32_t id) { return entries_[id].value; }
  const Tensor& value(std::int32_t id) const { return entries_[id].value; }
  Tensor& value(const std::string& name) { return entries_[id(name)].value; }
  const Tensor& value(const std::string& name) const {
    return entries_[id(name)].value;
  }
  Tensor& grad(std::int32_t id) { return entries_[id].grad; }
  const std::string& name(std::int32_t id) const { return entries_[id].name; }

  std::int32_t size() const { return static_cast<std::int32_t>(entries_.size()); }
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  void zero_grads();
  std::size_t total_elements() const;

  /// FNV hash over the raw bytes of every value tensor whose name starts
  /// with `prefix` (all tensors if empty), in registration order.
  std::uint64_t hash_values(const std::string& prefix = "") const;

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::int32_t> by_name_;
};

/// Per-graph bridge between a ParamStore and a Tape: parameters become leaf
/// nodes on first use, and after backward() the leaf gradients are pulled
/// back into the store in id order.
class Binder {
 public:
  Binder(Tape& tape, ParamStore& store) : tape_(tape), store_(store) {}

  Var operator()(const std::string& name);
  Var get(std::int32_t id);

  /// Pre-binds `name` to an existing node instead of a fresh leaf
  /// (used by tests to route finite-difference perturbations).
  void inject(const std::string& name, Var v);

  /// Accumulates tape gradients into store gradients (+=), in id order.
  void pull_grads();

  /// Ids of every parameter bound so far, ascending.
  std::vector<std::int32_t> bound_ids() const;

  Tape& tape() { return tape_; }
  ParamStore& store() { return store_; }

 private:
  Tape& tape_;
  ParamStore& store_;
  std::unordered_map<std::int32_t, Var> bound_;
};

/// Standard initializers. Weights are N(0, 1/fan_in); biases zero.
Tensor init_linear_weight(int out, int in, RngStream& rng);
Tensor init_gru_wih(int hidden, int in, RngStream& rng);
Tensor init_gru_whh(int hidden, RngStream& rng);

/// Registers W/b pairs for an MLP under `<prefix>.l<k>.{W,b}`.
void add_mlp(ParamStore& store, const std::string& prefix,
             const std::vector<int>& widths, RngStream& rng,
             bool zero_last = false);

/// Registers `<prefix>.{W_ih,W_hh,b_ih,b_hh}` for one GRU cell.
void add_gru(ParamStore& store, const std::string& prefix, int in, int hidden,
             RngStream& rng);

/// Applies the MLP registered by add_mlp; hidden activations tanh, last
/// layer linear.
Var apply_mlp(Binder& bind, const std::string& prefix, int n_layers, Var x,
              bool relu_hidden = false);

/// Runs the GRU registered by add_gru over a t-major slab ((T*B) x D) and
/// returns all hidden states stacked the same way ((T*B) x H).
/// `reverse` walks the steps backward in time.
Var apply_gru_slab(Binder& bind, const std::string& prefix, Var slab, int T,
                   int B, int hidden, bool reverse = false);

}  // namespace metassm
