// ILCK1 checkpoint files.
//
// All integers little-endian, reals IEEE-754 binary64 little-endian.
//
//   magic      "ILCK1" (5 bytes)
//   version    u32 = 1
//   config     u32 input_dim, u32 n_conv, n_conv x (u32 channels, u32 kernel, u32 stride),
//              u32 num_sabs, u32 d_h, u32 num_heads, u32 ff_dim,
//              u32 n_fc, n_fc x u32 dim, u32 blank_id
//   metadata   i32 stage, u32 len + UTF-8 method name
//   params     u32 count, count x (u32 len + UTF-8 name, u32 rank, rank x u32 dim, values f64)
//   ewc        u8 present; if 1: u32 count, count x (name, rank, dims, reference f64s, fisher f64s)
//
// Parameters are written in name order with rank 2 (rows, cols), row-major.

#pragma once

#include "ilkd/model.hpp"

#include <string>
#include <string_view>
#include <vector>

namespace ilkd {

std::vector<char> encode_checkpoint(const Checkpoint& ckpt);
/// Throws ParseError (with byte offset) on malformed input.
Checkpoint decode_checkpoint(std::string_view bytes);

void write_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint read_checkpoint(const std::string& path);

}  // namespace ilkd
