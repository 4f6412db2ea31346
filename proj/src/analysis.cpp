#include "ipt/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace ipt {

namespace {

// Cyclic Jacobi eigensolver for a symmetric matrix (row-major d x d).
// Returns eigenvalues (descending) and matching eigenvectors as rows.
void jacobi_eigen(std::vector<double> a, int64_t d, std::vector<double>* eigenvalues,
                  std::vector<std::vector<double>>* eigenvectors) {
  std::vector<double> v(static_cast<size_t>(d * d), 0.0);
  for (int64_t i = 0; i < d; ++i) v[static_cast<size_t>(i * d + i)] = 1.0;

  auto off_diag = [&] {
    double s = 0.0;
    for (int64_t i = 0; i < d; ++i) {
      for (int64_t j = i + 1; j < d; ++j) s += a[static_cast<size_t>(i * d + j)] * a[static_cast<size_t>(i * d + j)];
    }
    return s;
  };

  for (int sweep = 0; sweep < 128 && off_diag() > 1e-28; ++sweep) {
    for (int64_t p = 0; p < d; ++p) {
      for (int64_t q = p + 1; q < d; ++q) {
        const double apq = a[static_cast<size_t>(p * d + q)];
        if (std::abs(apq) < 1e-300) continue;
        const double app = a[static_cast<size_t>(p * d + p)];
        const double aqq = a[static_cast<size_t>(q * d + q)];
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int64_t i = 0; i < d; ++i) {
          const double aip = a[static_cast<size_t>(i * d + p)];
          const double aiq = a[static_cast<size_t>(i * d + q)];
          a[static_cast<size_t>(i * d + p)] = c * aip - s * aiq;
          a[static_cast<size_t>(i * d + q)] = s * aip + c * aiq;
        }
        for (int64_t j = 0; j < d; ++j) {
          const double apj = a[static_cast<size_t>(p * d + j)];
          const double aqj = a[static_cast<size_t>(q * d + j)];
          a[static_cast<size_t>(p * d + j)] = c * apj - s * aqj;
          a[static_cast<size_t>(q * d + j)] = s * apj + c * aqj;
        }
        for (int64_t i = 0; i < d; ++i) {
          const double vip = v[static_cast<size_t>(i * d + p)];
          const double viq = v[static_cast<size_t>(i * d + q)];
          v[static_cast<size_t>(i * d + p)] = c * vip - s * viq;
          v[static_cast<size_t>(i * d + q)] = s * vip + c * viq;
        }
      }
    }
  }

  std::vector<int64_t> order(static_cast<size_t>(d));
  for (int64_t i = 0; i < d; ++i) order[static_cast<size_t>(i)] = i;
  std::sort(order.begin(), order.end(), [&](int64_t x, int64_t y) {
    return a[static_cast<size_t>(x * d + x)] > a[static_cast<size_t>(y * d + y)];
  });

  eigenvalues->clear();
  eigenvectors->clear();
  for (int64_t rank = 0; rank < d; ++rank) {
    const int64_t col = order[static_cast<size_t>(rank)];
    eigenvalues->push_back(a[static_cast<size_t>(col * d + col)]);
    std::vector<double> vec(static_cast<size_t>(d));
    for (int64_t i = 0; i < d; ++i) vec[static_cast<size_t>(i)] = v[static_cast<size_t>(i * d + col)];
    eigenvectors->push_back(std::move(vec));
  }
}

void fix_sign(std::vector<double>* vec) {
  size_t argmax = 0;
  for (size_t i = 1; i < vec->size(); ++i) {
    if (std::abs((*vec)[i]) > std::abs((*vec)[argmax])) argmax = i;
  }
  if ((*vec)[argmax] < 0) {
    for (double& x : *vec) x = -x;
  }
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

Projection2D project_2d(const std::vector<std::vector<double>>& vectors,
                        const std::vector<std::string>& categories,
                        const std::vector<std::string>& ids) {
  const size_t n = vectors.size();
  if (n < 3) throw std::invalid_argument("project_2d: need at least 3 vectors");
  const int64_t d = static_cast<int64_t>(vectors[0].size());
  if (d < 2) throw std::invalid_argument("project_2d: need dimension >= 2");
  if (categories.size() != n) throw std::invalid_argument("project_2d: one category per vector");
  for (const auto& v : vectors) {
    if (static_cast<int64_t>(v.size()) != d) throw std::invalid_argument("project_2d: ragged input");
  }

  std::vector<double> mean(static_cast<size_t>(d), 0.0);
  for (const auto& v : vectors) {
    for (int64_t j = 0; j < d; ++j) mean[static_cast<size_t>(j)] += v[static_cast<size_t>(j)];
  }
  for (double& m : mean) m /= static_cast<double>(n);

  std::vector<double> cov(static_cast<size_t>(d * d), 0.0);
  for (const auto& v : vectors) {
    for (int64_t i = 0; i < d; ++i) {
      const double ci = v[static_cast<size_t>(i)] - mean[static_cast<size_t>(i)];
      for (int64_t j = i; j < d; ++j) {
        cov[static_cast<size_t>(i * d + j)] += ci * (v[static_cast<size_t>(j)] - mean[static_cast<size_t>(j)]);
      }
    }
  }
  for (int64_t i = 0; i < d; ++i) {
    for (int64_t j = i; j < d; ++j) {
      cov[static_cast<size_t>(i * d + j)] /= static_cast<double>(n - 1);
      cov[static_cast<size_t>(j * d + i)] = cov[static_cast<size_t>(i * d + j)];
    }
  }

  double total = 0.0;
  for (int64_t i = 0; i < d; ++i) total += cov[static_cast<size_t>(i * d + i)];
  if (total <= 1e-24) throw std::invalid_argument("project_2d: rank-0 input (no variance)");

  std::vector<double> eigenvalues;
  std::vector<std::vector<double>> eigenvectors;
  jacobi_eigen(cov, d, &eigenvalues, &eigenvectors);
  fix_sign(&eigenvectors[0]);
  fix_sign(&eigenvectors[1]);

  Projection2D out;
  out.explained_x = std::max(0.0, eigenvalues[0]) / total;
  out.explained_y = std::max(0.0, eigenvalues[1]) / total;
  for (size_t i = 0; i < n; ++i) {
    std::vector<double> centered(static_cast<size_t>(d));
    for (int64_t j = 0; j < d; ++j) {
      centered[static_cast<size_t>(j)] = vectors[i][static_cast<size_t>(j)] - mean[static_cast<size_t>(j)];
    }
    Projection2D::Point p;
    p.x = dot(centered, eigenvectors[0]);
    p.y = dot(centered, eigenvectors[1]);
    p.category = categories[i];
    p.id = i < ids.size() ? ids[i] : std::to_string(i);
    out.points.push_back(std::move(p));
  }
  return out;
}

DistanceStats distance_stats(const std::vector<std::vector<double>>& vectors,
                             const std::vector<std::string>& categories) {
  const size_t n = vectors.size();
  if (n < 2 || categories.size() != n) {
    throw std::invalid_argument("distance_stats: need >= 2 vectors with categories");
  }
  std::map<std::string, int64_t> counts;
  for (const auto& c : categories) ++counts[c];
  if (counts.size() < 2) throw std::invalid_argument("distance_stats: need >= 2 categories");
  for (const auto& [c, k] : counts) {
    if (k < 2) throw std::invalid_argument("distance_stats: category '" + c + "' has fewer than 2 points");
  }

  std::vector<double> norms(n);
  for (size_t i = 0; i < n; ++i) {
    norms[i] = std::sqrt(dot(vectors[i], vectors[i]));
    if (norms[i] < 1e-300) throw std::invalid_argument("distance_stats: zero vector at index " + std::to_string(i));
  }

  double intra = 0.0, inter = 0.0;
  int64_t n_intra = 0, n_inter = 0;
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = i + 1; j < n; ++j) {
      const double dist = 1.0 - dot(vectors[i], vectors[j]) / (norms[i] * norms[j]);
      if (categories[i] == categories[j]) {
        intra += dist;
        ++n_intra;
      } else {
        inter += dist;
        ++n_inter;
      }
    }
  }
  DistanceStats stats;
  stats.intra_mean = n_intra > 0 ? intra / static_cast<double>(n_intra) : 0.0;
  stats.inter_mean = n_inter > 0 ? inter / static_cast<double>(n_inter) : 0.0;
  stats.ratio = stats.inter_mean > 1e-15 ? stats.intra_mean / stats.inter_mean : 0.0;
  return stats;
}

std::vector<NearestToken> nearest_tokens(const Tensor& prompts, const Tensor& reference,
                                         const std::vector<std::string>& ref_names,
                                         int64_t top_k) {
  if (!prompts.defined() || !reference.defined()) throw std::invalid_argument("nearest_tokens: undefined input");
  if (reference.rows() < 1) throw std::invalid_argument("nearest_tokens: empty reference");
  if (prompts.cols() != reference.cols()) throw std::invalid_argument("nearest_tokens: width mismatch");
  if (top_k < 1 || top_k > reference.rows()) throw std::invalid_argument("nearest_tokens: bad top_k");

  const int64_t d = prompts.cols(), r = reference.rows();
  std::vector<double> ref_norms(static_cast<size_t>(r));
  for (int64_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < d; ++j) s += reference.data()[i * d + j] * reference.data()[i * d + j];
    ref_norms[static_cast<size_t>(i)] = std::sqrt(s);
  }

  std::vector<NearestToken> out;
  for (int64_t row = 0; row < prompts.rows(); ++row) {
    const double* p = prompts.data() + row * d;
    double pn = 0.0;
    for (int64_t j = 0; j < d; ++j) pn += p[j] * p[j];
    pn = std::sqrt(pn);

    std::vector<std::pair<double, int64_t>> sims;  // (similarity, id)
    for (int64_t i = 0; i < r; ++i) {
      double s = 0.0;
      for (int64_t j = 0; j < d; ++j) s += p[j] * reference.data()[i * d + j];
      const double denom = pn * ref_norms[static_cast<size_t>(i)];
      sims.emplace_back(denom > 1e-300 ? s / denom : 0.0, i);
    }
    // ties break toward the lower token id
    std::sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    for (int64_t k = 0; k < top_k; ++k) {
      NearestToken nt;
      nt.prompt_row = row;
      nt.token_id = sims[static_cast<size_t>(k)].second;
      nt.token = static_cast<size_t>(nt.token_id) < ref_names.size()
                     ? ref_names[static_cast<size_t>(nt.token_id)]
                     : std::to_string(nt.token_id);
      nt.similarity = sims[static_cast<size_t>(k)].first;
      out.push_back(std::move(nt));
    }
  }
  return out;
}

std::vector<double> plm_sentence_embedding(const Transformer& backbone,
                                           const std::vector<int64_t>& ids) {
  NoGradGuard no_grad;
  PromptedInput input;
  input.token_ids = ids;
  return mean_rows(backbone.forward_states(input)).values();
}

std::vector<double> prompt_mean_embedding(const PromptStrategy& strategy,
                                          const LabeledInstance& instance) {
  NoGradGuard no_grad;
  GeneratedPrompts prompts = strategy.generate(instance);
  Tensor rows = prompts.input.rows.defined() ? prompts.input.rows : prompts.layer_prefixes.at(0);
  return mean_rows(rows).values();
}

// ------------------------------ writers ------------------------------

void write_projection_csv(const Projection2D& projection, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "id,x,y,category\n";
  for (const auto& p : projection.points) {
    out << p.id << ',' << p.x << ',' << p.y << ',' << p.category << "\n";
  }
}

void write_scatter_svg(const Projection2D& projection, const std::string& path) {
  static const std::array<const char*, 13> palette = {
      "#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#46f0f0", "#f032e6",
      "#bcf60c", "#fabebe", "#008080", "#9a6324", "#800000", "#808000"};

  double min_x = 1e300, max_x = -1e300, min_y = 1e300, max_y = -1e300;
  for (const auto& p : projection.points) {
    min_x = std::min(min_x, p.x);
    max_x = std::max(max_x, p.x);
    min_y = std::min(min_y, p.y);
    max_y = std::max(max_y, p.y);
  }
  const double span_x = std::max(1e-12, max_x - min_x);
  const double span_y = std::max(1e-12, max_y - min_y);
  const double w = 640, h = 480, margin = 40;

  std::vector<std::string> cats;
  for (const auto& p : projection.points) {
    if (std::find(cats.begin(), cats.end(), p.category) == cats.end()) cats.push_back(p.category);
  }

  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w + 220 << "\" height=\"" << h
      << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (const auto& p : projection.points) {
    const double cx = margin + (p.x - min_x) / span_x * (w - 2 * margin);
    const double cy = h - margin - (p.y - min_y) / span_y * (h - 2 * margin);
    const size_t ci =
        static_cast<size_t>(std::find(cats.begin(), cats.end(), p.category) - cats.begin());
    out << "<circle cx=\"" << cx << "\" cy=\"" << cy << "\" r=\"3\" fill=\""
        << palette[ci % palette.size()] << "\" fill-opacity=\"0.7\"/>\n";
  }
  for (size_t ci = 0; ci < cats.size(); ++ci) {
    const double ly = 20 + 16 * static_cast<double>(ci);
    out << "<circle cx=\"" << w + 12 << "\" cy=\"" << ly << "\" r=\"4\" fill=\""
        << palette[ci % palette.size()] << "\"/>\n";
    out << "<text x=\"" << w + 22 << "\" y=\"" << ly + 4 << "\" font-size=\"11\">" << cats[ci]
        << "</text>\n";
  }
  out << "</svg>\n";
}

std::string render_case_study_markdown(const std::vector<CaseStudyReport>& reports) {
  std::ostringstream out;
  out << "# Case studies\n\n";
  out << "Nearest input/vocabulary tokens per prompt row (cosine similarity), with the\n"
         "matched tokens marked **bold** inside each instance.\n\n";
  for (const CaseStudyReport& report : reports) {
    out << "## " << report.strategy << "\n\n";
    out << "| instance | predicted | gold | text | nearest tokens |\n";
    out << "|---|---|---|---|---|\n";
    for (const CaseStudyEntry& entry : report.entries) {
      std::set<std::string> matched;
      for (const NearestToken& nt : entry.nearest) matched.insert(nt.token);
      std::ostringstream text;
      std::istringstream words(entry.text);
      std::string word;
      bool first = true;
      while (words >> word) {
        if (!first) text << ' ';
        first = false;
        if (matched.count(word)) {
          text << "**" << word << "**";
        } else {
          text << word;
        }
      }
      out << "| " << entry.instance_id << " | " << entry.predicted_label << " | "
          << entry.gold_label << " | " << text.str() << " | ";
      for (size_t i = 0; i < entry.nearest.size(); ++i) {
        if (i) out << ", ";
        out << entry.nearest[i].token << " (";
        out.setf(std::ios::fixed);
        out.precision(3);
        out << entry.nearest[i].similarity << ")";
        out.unsetf(std::ios::fixed);
      }
      out << " |\n";
    }
    out << "\n";
  }
  return out.str();
}

}  // namespace ipt
