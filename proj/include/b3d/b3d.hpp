#ifndef B3D_B3D_HPP
#define B3D_B3D_HPP

#include "b3d/error.hpp"
#include "b3d/grad.hpp"
#include "b3d/maskops.hpp"
#include "b3d/metrics.hpp"
#include "b3d/ndgrid.hpp"
#include "b3d/png_io.hpp"
#include "b3d/raster.hpp"
#include "b3d/recon.hpp"
#include "b3d/recon_io.hpp"
#include "b3d/rng.hpp"
#include "b3d/sffde.hpp"
#include "b3d/weights.hpp"

#endif // B3D_B3D_HPP
