#pragma once

namespace flowmc {

// Standard normal CDF and density. Cubic Hermite interpolation of a table
// on [-8, 8]; absolute error below 1e-13, saturating to 0/1 outside.
double normal_cdf(double z);
double normal_pdf(double z);

// Distributes a scalar s in [0, 1] over k bins by integrating a Gaussian
// kernel of width sigma = 1/k centered at s across each bin. Kernel mass
// outside the domain is dropped, not renormalized, so entries always sum to
// normal_cdf((1 - s) * k) - normal_cdf(-s * k).
// out must hold k doubles. Throws DomainError if s is outside [0, 1].
void one_blob(double s, int k, double* out);

// d out[i] / ds for the encoding above. out must hold k doubles.
void one_blob_grad(double s, int k, double* out);

// Quantile function of the standard normal for p in (0, 1); accurate to a
// few ulps (rational initial guess plus one Halley refinement against
// erfc). Used for exact inverse-CDF sampling of truncated Gaussians.
double inverse_normal_cdf(double p);

}  // namespace flowmc
