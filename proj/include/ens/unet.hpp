#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "ens/blocks.hpp"

namespace ens {

// One U-Net stage's option pool description.
struct StageSpec {
  std::string id;                     // E1,E2,E3,B,D3,D2,D1,R
  int teacher_blocks = 0;
  std::vector<int> surrogate_blocks;  // descending block counts
  int option_count() const { return 1 + static_cast<int>(surrogate_blocks.size()); }
};

// The fixed 8-stage pool: teacher [4,6,6,8 | 6,6,4,4], surrogate counts
// chosen as the descending-even lists that give option counts (3,4,4,5,4,4,3,3).
std::vector<StageSpec> default_stage_specs();

// Channel multiplier (x base width) and spatial downsample factor per stage.
constexpr std::array<int, 8> kStageWidthMult = {1, 2, 4, 8, 4, 2, 2, 2};
constexpr std::array<int, 8> kStageScale = {1, 2, 4, 8, 4, 2, 1, 1};

// Architecture code z: one option index per stage, 0 = teacher.
using ArchCode = std::vector<int>;

std::uint64_t search_space_size(const std::vector<StageSpec>& specs);
// Yields every code exactly once in lexicographic order.
void enumerate_search_space(const std::vector<StageSpec>& specs,
                            const std::function<void(const ArchCode&)>& fn);
void validate_code(const ArchCode& code, const std::vector<StageSpec>& specs);

std::string code_str(const ArchCode& code);

// Stem, resolution transitions, skip fusions and output head. Shared by all
// hybrids assembled from one library.
struct NetworkGlue {
  Conv1x1P stem;                 // 3 -> C
  std::array<Conv1x1P, 3> down;  // post-unshuffle projections
  std::array<Conv1x1P, 3> up;    // pre-shuffle projections
  std::array<Conv1x1P, 3> fuse;  // skip-fusion projections (D3, D2, D1)
  Conv1x1P out;                  // 2C -> 3
  void init(int base_width, Rng& rng);
  void visit(const std::string& p, const ParamVisitor& fn);
};

struct SurrogateMeta {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::uint64_t seed = 0;
  int steps = 0;
};

// Teacher stages plus distilled surrogate variants, with the glue they attach to.
struct BlockLibrary {
  int base_width = 16;
  ModelDims dims;
  std::vector<StageSpec> specs;
  NetworkGlue glue;
  std::array<std::vector<StageVariant>, 8> options;  // [stage][option], 0 = teacher
  std::array<std::vector<SurrogateMeta>, 8> meta;    // per surrogate (option-1)

  bool complete() const;  // every spec option present
};

// Fresh library containing glue + teacher variants only; surrogates are
// appended by distillation.
BlockLibrary make_teacher_library(const std::vector<StageSpec>& specs, int base_width,
                                  const ModelDims& dims, std::uint64_t seed);

struct Network {
  int base_width = 16;
  ModelDims dims;
  ArchCode code;
  NetworkGlue glue;
  std::array<StageVariant, 8> stages;

  struct Trace {
    std::array<Value, 8> stage_in;
    std::array<Value, 8> stage_out;
    Value output;
  };

  // Full forward pass; spatial dims must be divisible by 8.
  Trace forward_trace(Graph& g, Value x);
  Value forward(Graph& g, Value x) { return forward_trace(g, x).output; }
  Tensor infer(const Tensor& x);

  nlohmann::json describe();
  void visit(const ParamVisitor& fn);
  std::vector<Tensor*> params();
  std::size_t param_count();

  void save(const std::string& path);
  void load(const std::string& path);
};

Network assemble(const ArchCode& code, const BlockLibrary& library);

// Checkpoint round-trip for a (possibly surrogate-complete) library. The
// structural description (specs, widths, dims) comes from the caller; only
// options present in the file are restored.
void save_library(const std::string& path, BlockLibrary& lib);
BlockLibrary load_library(const std::string& path, const std::vector<StageSpec>& specs,
                          int base_width, const ModelDims& dims);

}  // namespace ens
