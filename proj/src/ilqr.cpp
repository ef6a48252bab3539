#include "trackrl/ilqr.hpp"

#include <algorithm>
#include <cmath>

namespace trackrl {

void ILQRConfig::validate() const {
  if (horizon < 2) throw InvalidParams("ILQR horizon must be >= 2");
  if (!(dt > 0.0)) throw InvalidParams("ILQR dt must be > 0");
  if ((state_cost.array() < 0.0).any() || (control_cost.array() < 0.0).any() ||
      (terminal_cost.array() < 0.0).any()) {
    throw InvalidParams("ILQR weights must be >= 0");
  }
  if (!(reg_init > 0.0)) throw InvalidParams("ILQR reg_init must be > 0");
  if (max_iters < 0) throw InvalidParams("ILQR max_iters must be >= 0");
}

Linearization linearize(const VehicleState& s, Action a, double dt) {
  const double c = std::cos(s.phi);
  const double sn = std::sin(s.phi);
  Linearization lin;
  lin.A = Eigen::Matrix3d::Identity();
  lin.A(0, 2) = -a.v_cmd * sn * dt;
  lin.A(1, 2) = a.v_cmd * c * dt;
  lin.B.setZero();
  lin.B(0, 0) = c * dt;
  lin.B(1, 0) = sn * dt;
  lin.B(2, 1) = dt;
  return lin;
}

Eigen::Vector3d unicycle_step(const Eigen::Vector3d& x, Action a, double dt) {
  return {x[0] + a.v_cmd * std::cos(x[2]) * dt,
          x[1] + a.v_cmd * std::sin(x[2]) * dt, x[2] + a.omega_cmd * dt};
}

namespace {

Eigen::Vector3d deviation(const Eigen::Vector3d& x, const RefPoint& r) {
  return {x[0] - r.x, x[1] - r.y, wrap_angle(x[2] - r.phi)};
}

Eigen::Vector2d control_deviation(Action a, const RefPoint& r) {
  return {a.v_cmd - r.v, a.omega_cmd};
}

void check_ref(const std::vector<RefPoint>& ref, const ILQRConfig& cfg) {
  if (static_cast<int>(ref.size()) != cfg.horizon) {
    throw InvalidParams("ILQR reference length must equal the horizon");
  }
}

// Rolls out u (clamped in place) from x0.
std::vector<Eigen::Vector3d> rollout(const Eigen::Vector3d& x0,
                                     std::vector<Action>& u, double dt) {
  std::vector<Eigen::Vector3d> xs(u.size() + 1);
  xs[0] = x0;
  for (std::size_t t = 0; t < u.size(); ++t) {
    u[t] = clamp_action(u[t]);
    xs[t + 1] = unicycle_step(xs[t], u[t], dt);
  }
  return xs;
}

double trajectory_cost(const std::vector<Eigen::Vector3d>& xs,
                       const std::vector<Action>& u,
                       const std::vector<RefPoint>& ref, const ILQRConfig& cfg) {
  const std::size_t h = u.size();
  double cost = 0.0;
  for (std::size_t t = 0; t < h; ++t) {
    const Eigen::Vector2d du = control_deviation(u[t], ref[t]);
    cost += du.dot(cfg.control_cost.cwiseProduct(du));
    const Eigen::Vector3d dx = deviation(xs[t + 1], ref[t]);
    const Eigen::Vector3d& w = t + 1 == h ? cfg.terminal_cost : cfg.state_cost;
    cost += dx.dot(w.cwiseProduct(dx));
  }
  return cost;
}

}  // namespace

double ilqr_cost(const Eigen::Vector3d& x0, const std::vector<Action>& u,
                 const std::vector<RefPoint>& ref, const ILQRConfig& cfg) {
  cfg.validate();
  check_ref(ref, cfg);
  std::vector<Action> uc = u;
  const auto xs = rollout(x0, uc, cfg.dt);
  return trajectory_cost(xs, uc, ref, cfg);
}

ILQRResult ilqr_solve(const VehicleState& s0, const std::vector<RefPoint>& ref,
                      const ILQRConfig& cfg, const std::vector<Action>* init) {
  cfg.validate();
  check_ref(ref, cfg);
  const auto h = static_cast<std::size_t>(cfg.horizon);
  const Eigen::Vector3d x0(s0.x, s0.y, s0.phi);

  std::vector<Action> u(h);
  if (init != nullptr && init->size() == h) {
    u = *init;
  } else {
    double prev_phi = s0.phi;
    for (std::size_t t = 0; t < h; ++t) {
      u[t] = {ref[t].v, wrap_angle(ref[t].phi - prev_phi) / cfg.dt};
      prev_phi = ref[t].phi;
    }
  }
  std::vector<Eigen::Vector3d> xs = rollout(x0, u, cfg.dt);
  double cost = trajectory_cost(xs, u, ref, cfg);

  ILQRResult res;
  res.cost_history.push_back(cost);
  double reg = cfg.reg_init;
  std::vector<Eigen::Vector2d> k(h);
  std::vector<Eigen::Matrix<double, 2, 3>> K(h);
  const Eigen::Matrix3d Q = (2.0 * cfg.state_cost).asDiagonal();
  const Eigen::Matrix3d Qf = (2.0 * cfg.terminal_cost).asDiagonal();
  const Eigen::Matrix2d R = (2.0 * cfg.control_cost).asDiagonal();

  for (int iter = 0; iter < cfg.max_iters; ++iter) {
    // Backward pass; retried with a larger reg on non-PD Q_uu.
    bool backward_ok = false;
    double expected = 0.0;
    while (!backward_ok) {
      const Eigen::Vector3d dxh = deviation(xs[h], ref[h - 1]);
      Eigen::Vector3d vx = Qf * dxh;
      Eigen::Matrix3d vxx = Qf;
      expected = 0.0;
      backward_ok = true;
      for (std::size_t t = h; t-- > 0;) {
        VehicleState st;
        st.phi = xs[t][2];
        const Linearization lin = linearize(st, u[t], cfg.dt);
        // x_t (t >= 1) carries running state cost against ref[t-1].
        Eigen::Vector3d lx = Eigen::Vector3d::Zero();
        Eigen::Matrix3d lxx = Eigen::Matrix3d::Zero();
        if (t >= 1) {
          lx = Q * deviation(xs[t], ref[t - 1]);
          lxx = Q;
        }
        const Eigen::Vector2d lu = R * control_deviation(u[t], ref[t]);
        const Eigen::Vector3d qx = lx + lin.A.transpose() * vx;
        const Eigen::Vector2d qu = lu + lin.B.transpose() * vx;
        const Eigen::Matrix3d qxx = lxx + lin.A.transpose() * vxx * lin.A;
        const Eigen::Matrix2d quu_raw = R + lin.B.transpose() * vxx * lin.B;
        const Eigen::Matrix2d quu = quu_raw + reg * Eigen::Matrix2d::Identity();
        const Eigen::Matrix<double, 2, 3> qux = lin.B.transpose() * vxx * lin.A;
        Eigen::LLT<Eigen::Matrix2d> llt(quu);
        if (llt.info() != Eigen::Success) {
          backward_ok = false;
          break;
        }
        k[t] = -llt.solve(qu);
        K[t] = -llt.solve(qux);
        expected += k[t].dot(qu) + 0.5 * k[t].dot(quu_raw * k[t]);
        vx = qx + K[t].transpose() * quu_raw * k[t] + K[t].transpose() * qu +
             qux.transpose() * k[t];
        vxx = qxx + K[t].transpose() * quu_raw * K[t] + K[t].transpose() * qux +
              qux.transpose() * K[t];
        vxx = 0.5 * (vxx + vxx.transpose());
      }
      if (!backward_ok) {
        reg *= 2.0;
        if (reg > cfg.reg_max) break;
      }
    }
    if (!backward_ok) {
      res.no_descent = true;
      break;
    }

    // Forward pass with backtracking on the feedforward term.
    bool accepted = false;
    for (double alpha = 1.0; alpha > 1e-4; alpha *= 0.5) {
      std::vector<Action> un(h);
      std::vector<Eigen::Vector3d> xn(h + 1);
      xn[0] = x0;
      for (std::size_t t = 0; t < h; ++t) {
        Eigen::Vector3d dx = xn[t] - xs[t];
        dx[2] = wrap_angle(dx[2]);
        const Eigen::Vector2d du = alpha * k[t] + K[t] * dx;
        un[t] = clamp_action({u[t].v_cmd + du[0], u[t].omega_cmd + du[1]});
        xn[t + 1] = unicycle_step(xn[t], un[t], cfg.dt);
      }
      const double c = trajectory_cost(xn, un, ref, cfg);
      if (c < cost) {
        const double change = cost - c;
        u = std::move(un);
        xs = std::move(xn);
        cost = c;
        res.cost_history.push_back(cost);
        accepted = true;
        reg = std::max(reg * 0.5, 1e-9);
        if (change < cfg.tol) iter = cfg.max_iters;  // converged
        break;
      }
    }
    ++res.iterations;
    if (!accepted) {
      // No improving step: a fixed point when the predicted gain is tiny,
      // otherwise stiffen the regularization and retry.
      if (std::abs(expected) < cfg.tol) break;
      reg *= 2.0;
      if (reg > cfg.reg_max) {
        res.no_descent = true;
        break;
      }
    }
  }
  res.actions = std::move(u);
  res.states = std::move(xs);
  res.cost = cost;
  return res;
}

std::vector<RefPoint> reference_window(const Trajectory& traj, double x,
                                       double y, std::size_t i,
                                       const ILQRConfig& cfg) {
  double s = std::clamp(project_arc_length(traj, x, y, i), 0.0, traj.length());
  std::vector<RefPoint> ref(static_cast<std::size_t>(cfg.horizon));
  for (auto& r : ref) {
    const Waypoint here = traj.interpolate(s);
    s = std::min(s + here.v * cfg.dt, traj.length());
    const Waypoint w = traj.interpolate(s);
    r = {w.x, w.y, w.theta, w.v};
  }
  return ref;
}

TrackRun ilqr_track(std::shared_ptr<const Trajectory> traj,
                    const std::optional<SurrogateParams>& plant,
                    const ILQRConfig& cfg, const EvalConfig& eval,
                    std::uint64_t noise_seed) {
  cfg.validate();
  EvalConfig ecfg = eval;
  ecfg.env.surrogate = plant;
  std::vector<Action> warm;
  const Controller controller = [&](const Observation&, const TrackingEnv& env) {
    const VehicleState& s = env.state();
    const auto ref =
        reference_window(env.track(), s.x, s.y, env.waypoint_index(), cfg);
    // The planner assumes commands act instantly (kinematic model).
    const ILQRResult res = ilqr_solve(s, ref, cfg, warm.empty() ? nullptr : &warm);
    warm.assign(res.actions.begin() + 1, res.actions.end());
    warm.push_back(res.actions.back());
    return res.actions.front();
  };
  TrackRun run;
  run.log = run_controller(controller, traj, ecfg, noise_seed);
  run.metrics = compute_metrics(run.log, *traj, ecfg.env.divergence_cutoff);
  return run;
}

}  // namespace trackrl
