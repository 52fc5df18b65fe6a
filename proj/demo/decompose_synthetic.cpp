// Decomposes one synthetic class head and prints what each prototype
// contributes to the logit of the first image.

#include <cstdio>

#include "pppn/pppn.hpp"
#include "pppn/synthetic.hpp"

int main() {
  pppn::SyntheticSpec spec;
  spec.classes = 2;
  spec.images = 10;
  const auto ds = pppn::make_synthetic(spec);
  const auto& cls = ds.classes[0];

  pppn::NMFConfig nmf;
  nmf.seed = 1;
  const auto d = pppn::decompose_class(cls.clean, ds.head.rows.row(0), 3, nmf, pppn::RefineConfig{},
                                       pppn::RefineMode::dynamic);

  std::printf("alpha:");
  for (double a : d.alpha) std::printf(" %.4f", a);
  std::printf("\n|v - sum p~|_inf = %.3e\n", d.reconstruction_error());
  std::printf("refinement objective %.6f -> %.6f (%zu iterations)\n", d.objective_initial(),
              d.objective_final(), d.refine_iterations);

  const auto x = pppn::feature_map(cls.clean, 0);
  const auto c = pppn::contributions(x, d);
  std::printf("image %s logit %.6f =", x.image_id.c_str(), pppn::class_logit(x, d.v));
  for (double v : c) std::printf(" %+.6f", v);
  std::printf("\n");
}
