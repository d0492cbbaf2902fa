#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "bcos/nn.hpp"

namespace bcos {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// "BCOS" | u32 version | u64 header length | JSON header | f32 LE blobs.
///
/// The header lists every layer with its scalar settings and, per tensor,
/// shape, byte offset and byte count into the blob section. Blobs follow in
/// declaration order with no padding, so the byte counts add up to the rest
/// of the file. Encoding is deterministic: encode(decode(encode(m))) is
/// byte-identical to encode(m).
std::string encode_checkpoint(const ModelGraph<float>& model);

/// Throws BadMagic, VersionUnsupported, CorruptHeader or TruncatedBlob.
ModelGraph<float> decode_checkpoint(std::string_view bytes);

void save_checkpoint(const ModelGraph<float>& model, const std::filesystem::path& path);
ModelGraph<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace bcos
