#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ipt/backbone.hpp"
#include "ipt/strategies.hpp"
#include "ipt/tensor.hpp"

namespace ipt {

struct Projection2D {
  struct Point {
    double x = 0.0;
    double y = 0.0;
    std::string category;
    std::string id;
  };
  std::vector<Point> points;
  double explained_x = 0.0;  // fraction of total variance on each axis
  double explained_y = 0.0;
};

// Principal-component projection onto the top two axes. Deterministic sign
// convention: each component's largest-magnitude loading is positive.
Projection2D project_2d(const std::vector<std::vector<double>>& vectors,
                        const std::vector<std::string>& categories,
                        const std::vector<std::string>& ids = {});

struct DistanceStats {
  double intra_mean = 0.0;
  double inter_mean = 0.0;
  double ratio = 0.0;  // intra / inter; 0 when inter degenerates to 0
};

// Mean pairwise cosine distance (1 - cosine similarity) within and across
// categories, by exhaustive O(n^2) enumeration.
DistanceStats distance_stats(const std::vector<std::vector<double>>& vectors,
                             const std::vector<std::string>& categories);

struct NearestToken {
  int64_t prompt_row = 0;
  int64_t token_id = 0;  // row index into the reference matrix
  std::string token;
  double similarity = 0.0;
};

// Per prompt row, the top_k most cosine-similar reference rows (exhaustive
// scan; ties break toward the lower token id).
std::vector<NearestToken> nearest_tokens(const Tensor& prompts, const Tensor& reference,
                                         const std::vector<std::string>& ref_names,
                                         int64_t top_k = 1);

struct CaseStudyEntry {
  std::string instance_id;
  std::string text;
  std::string predicted_label;
  std::string gold_label;
  std::vector<NearestToken> nearest;
};

struct CaseStudyReport {
  std::string strategy;
  std::vector<CaseStudyEntry> entries;
};

// Mean-pooled final-layer states (the PLM-side sentence embedding).
std::vector<double> plm_sentence_embedding(const Transformer& backbone,
                                           const std::vector<int64_t>& ids);
// Mean of the strategy's prompt rows for one instance.
std::vector<double> prompt_mean_embedding(const PromptStrategy& strategy,
                                          const LabeledInstance& instance);

void write_projection_csv(const Projection2D& projection, const std::string& path);
void write_scatter_svg(const Projection2D& projection, const std::string& path);
std::string render_case_study_markdown(const std::vector<CaseStudyReport>& reports);

}  // namespace ipt
