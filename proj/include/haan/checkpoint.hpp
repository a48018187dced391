#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "haan/networks.hpp"
#include "haan/tensor.hpp"

namespace haan {

// Binary container: magic "HAAN", u32 LE version=1, u32 section count; each
// section is u16 name length + UTF-8 name + u8 rank + rank x u32 dims + a
// row-major little-endian f32 payload; then a trailing u64 step counter.
// Adam moments ride along as "<param>.m" / "<param>.v" sections.
struct Checkpoint {
    struct Section {
        std::string name;
        Shape dims;
        std::vector<float> values;
    };
    std::vector<Section> sections;
    std::uint64_t step = 0;

    const Section* find(const std::string& name) const;
    void add(const std::string& name, Shape dims, std::vector<float> values);
};

// Atomic: writes a temp file, then renames.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);

Checkpoint load_checkpoint(const std::string& path);

// ---- bridges between networks and sections -------------------------------

void append_params(Checkpoint& ckpt, const std::string& prefix, const NetworkParams<float>& params);

void append_adam(Checkpoint& ckpt, const std::string& prefix, const NetworkParams<float>& params,
                 const AdamState<float>& state);

// Fills tensors by name; missing section or shape mismatch -> FormatError.
void load_params(const Checkpoint& ckpt, const std::string& prefix, NetworkParams<float>& params);

// Restores moments where present; returns false when none were stored.
bool load_adam(const Checkpoint& ckpt, const std::string& prefix, const NetworkParams<float>& params,
               AdamState<float>& state);

// Architecture metadata travels as a small "meta.arch" section so inference
// can rebuild the networks without a separate config.
void append_arch(Checkpoint& ckpt, const ArchConfig& arch);
std::optional<ArchConfig> read_arch(const Checkpoint& ckpt);

}  // namespace haan
