#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cassle/nn.hpp"
#include "cassle/tensor.hpp"

namespace cassle {

// Checkpoint format "CSLE": header (magic, version u32, param count u32),
// then per param: name length u16, name bytes, rank u8, extents u32 each,
// float64 values little-endian. The digest is the SHA-256 of the payload
// (everything after the header).

inline constexpr uint32_t kCheckpointVersion = 1;

std::vector<uint8_t> serialize_params(const std::vector<const Param*>& params);
std::string params_digest(const std::vector<const Param*>& params);
std::string encoder_digest(const EncoderState& enc);

void write_checkpoint(const std::string& path, const EncoderState& enc);
// Parsed checkpoint: named parameter buffers in file order.
std::vector<Param> read_checkpoint(const std::string& path);
// Loads values into an existing encoder, matching by name and shape.
void load_checkpoint(const std::string& path, EncoderState& enc);
// Rebuilds an encoder from a checkpoint alone, inferring the architecture
// from the stored parameter names and shapes.
EncoderState encoder_from_checkpoint(const std::string& path);

// Feature dump "CSFE": magic, count u32, dim u32, float64 rows, label u32
// array.
struct FeatureDump {
  MatrixRM features;
  std::vector<uint32_t> labels;
};

void write_feature_dump(const std::string& path, const MatrixRM& features,
                        const std::vector<uint32_t>& labels);
FeatureDump read_feature_dump(const std::string& path);

}  // namespace cassle
