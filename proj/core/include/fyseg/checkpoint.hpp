#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fyseg/tensor.hpp"

namespace fyseg {

// Checkpoint container: ordered named tensors.
//
// On disk: magic "FYS1", uint32-le tensor count, then per tensor:
// uint16-le name length, UTF-8 name, uint8 rank, rank uint32-le extents,
// float32-le values in row-major order.
struct Checkpoint {
    std::vector<std::pair<std::string, Tensor>> entries;

    void add(const std::string& name, const Tensor& t) { entries.emplace_back(name, t); }
    const Tensor* find(const std::string& name) const;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace fyseg
