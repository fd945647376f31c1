#ifndef VAG_CHECKPOINT_HPP
#define VAG_CHECKPOINT_HPP

#include <map>
#include <string>
#include <vector>

#include "vag/optim.hpp"

namespace vag {

// "VAGC" checkpoint: magic, version u32, record count u32, then per record
// name (u16 length + UTF-8), rank u8, extents u32 each, f32 little-endian
// payload. Adam moments ride along as "<name>.m1" / "<name>.m2".

struct CheckpointRecord {
    Shape shape;
    std::vector<float> data;
};

using CheckpointMap = std::map<std::string, CheckpointRecord>;

constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const CheckpointMap& records);
CheckpointMap load_checkpoint(const std::string& path);

// Parameters (and optionally moments) as checkpoint records.
CheckpointMap pack_params(const ParamStore& store, bool with_moments);
// Copies matching records back into the store; every store parameter must be
// present with an identical shape. Moments restored when present.
void unpack_params(const CheckpointMap& records, ParamStore& store);

}  // namespace vag

#endif
