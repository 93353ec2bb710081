#pragma once

#include <map>
#include <string>

#include "ens/tensor.hpp"

namespace ens {

// Binary parameter container.
//
// Layout (all integers little-endian):
//   magic   : 4 bytes "ENSH"
//   version : u16 (currently 1)
//   count   : u32 number of entries
//   entry*  : u32 name length, name bytes (no terminator),
//             4 x u32 shape (n,c,h,w),
//             n*c*h*w f64 values (IEEE-754, little-endian)
// Entries are written in lexicographic name order so identical parameter
// sets serialize to identical bytes.
void save_checkpoint(const std::string& path, const std::map<std::string, Tensor>& entries);

std::map<std::string, Tensor> load_checkpoint(const std::string& path);

}  // namespace ens
