// Command-line surface for the hand-mesh pipeline: dataset synthesis, weakly
// supervised fitting, mesh deformation, depth rendering, evaluation, and the
// gradient audit. Every command honors --seed and --config; flags override
// config-file values. Exit codes: 0 success, 1 usage, 2 data/validation,
// 3 numerical failure.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include <handfit/fit.hpp>
#include <handfit/gradcheck.hpp>
#include <handfit/synth.hpp>

namespace {

using namespace handfit;

nlohmann::json load_config_file(const std::string& path) {
    if (path.empty()) return nlohmann::json::object();
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open config file " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("config file " + path + ": " + e.what());
    }
    return j;
}

void write_manifest(const std::filesystem::path& dir, const std::string& command,
                    const nlohmann::json& effective_config, int argc, char** argv) {
    std::filesystem::create_directories(dir);
    nlohmann::json m;
    m["command"] = command;
    m["config"] = effective_config;
    nlohmann::json args = nlohmann::json::array();
    for (int i = 0; i < argc; ++i) args.push_back(argv[i]);
    m["argv"] = args;
    std::ofstream out(dir / "run_manifest.json");
    out << m.dump(1) << "\n";
}

int run(int argc, char** argv) {
    CLI::App app{"differentiable hand-mesh fitting toolkit"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    app.add_option("--config", config_path, "JSON config file; flags override its values");

    // ---- synth ----
    auto* synth = app.add_subcommand("synth", "generate a synthetic subject and dataset");
    std::string synth_out;
    SynthConfig scfg;
    bool seed_given = false;
    std::uint64_t seed_flag = 0;
    synth->add_option("--out", synth_out, "output dataset directory")->required();
    auto* synth_seed_opt = synth->add_option("--seed", seed_flag, "master seed");
    int budget = -1, n_cams = -1, n_train = -1, n_test = -1, image = -1;
    double bone_perturb = -1;
    synth->add_option("--budget", budget, "approximate vertex budget");
    synth->add_option("--cameras", n_cams, "number of cameras");
    synth->add_option("--train", n_train, "training poses");
    synth->add_option("--test", n_test, "test poses");
    synth->add_option("--image", image, "depth map resolution");
    synth->add_option("--bone-perturb", bone_perturb, "bone length perturbation fraction");

    // ---- fit ----
    auto* fitc = app.add_subcommand("fit", "train pose variables and corrective nets");
    std::string fit_dataset, fit_out, fit_resume;
    bool desk = false;
    fitc->add_option("--dataset", fit_dataset, "dataset directory from synth")->required();
    fitc->add_option("--out", fit_out, "output directory (checkpoint + loss csv)")->required();
    fitc->add_option("--resume", fit_resume, "checkpoint to resume from");
    fitc->add_flag("--desk-scale", desk, "start from the reduced single-CPU schedule");
    FitConfig fit_flags;
    std::uint64_t fit_seed = 0;
    auto* fit_seed_opt = fitc->add_option("--seed", fit_seed, "fit seed");
    int epochs = -1, batch = -1, c_out = -1;
    double lr = -1;
    fitc->add_option("--epochs", epochs);
    fitc->add_option("--lr", lr);
    fitc->add_option("--batch", batch);
    fitc->add_option("--c-out", c_out);
    bool no_pose = false, no_depth = false, no_penet = false, no_lap = false;
    bool no_skel = false, no_idvert = false, no_posevert = false;
    fitc->add_flag("--no-pose", no_pose, "disable the pose loss");
    fitc->add_flag("--no-depth", no_depth, "disable the depth loss");
    fitc->add_flag("--no-penet", no_penet, "disable the penetration loss");
    fitc->add_flag("--no-lap", no_lap, "disable the Laplacian loss");
    fitc->add_flag("--no-skel", no_skel, "disable the skeleton corrective head");
    fitc->add_flag("--no-idvert", no_idvert, "disable the identity vertex head");
    fitc->add_flag("--no-posevert", no_posevert, "disable the pose vertex head");
    int threads = -1;
    fitc->add_option("--threads", threads, "worker cap for parallel sections");

    // ---- deform ----
    auto* deform = app.add_subcommand("deform", "apply a checkpointed decoder to a pose");
    std::string deform_ckpt, deform_model, deform_pose = "zero", deform_out, deform_chains;
    deform->add_option("--checkpoint", deform_ckpt)->required();
    deform->add_option("--model", deform_model, "template bundle directory or OBJ")->required();
    deform->add_option("--pose", deform_pose, "'zero' or a JSON file with raw pose values");
    deform->add_option("--out", deform_out, "output OBJ path")->required();
    deform->add_option("--chains-out", deform_chains, "write posed collision sphere chains as JSON");

    // ---- render ----
    auto* render = app.add_subcommand("render", "rasterize depth maps of a mesh");
    std::string render_mesh, render_cams, render_out;
    render->add_option("--mesh", render_mesh, "OBJ mesh")->required();
    render->add_option("--cameras", render_cams, "camera rig JSON")->required();
    render->add_option("--out", render_out, "output directory for PFM files")->required();

    // ---- eval ----
    auto* evalc = app.add_subcommand("eval", "refit test poses with frozen nets and report metrics");
    std::string eval_ckpt, eval_dataset, eval_out;
    int eval_iters = -1, eval_threads = -1;
    evalc->add_option("--checkpoint", eval_ckpt)->required();
    evalc->add_option("--dataset", eval_dataset)->required();
    evalc->add_option("--out", eval_out)->required();
    evalc->add_option("--eval-iters", eval_iters);
    evalc->add_option("--threads", eval_threads);

    // ---- gradcheck ----
    auto* grad = app.add_subcommand("gradcheck", "finite-difference audit of every loss term");
    std::uint64_t grad_seed = 99;
    int grad_configs = 20;
    grad->add_option("--seed", grad_seed);
    grad->add_option("--configs", grad_configs, "configurations per term");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        app.exit(e);
        return 0;
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }
    const nlohmann::json file_cfg = load_config_file(config_path);

    if (synth->parsed()) {
        if (file_cfg.contains("synth")) scfg = file_cfg.at("synth").get<SynthConfig>();
        if (synth_seed_opt->count() > 0) scfg.seed = seed_flag;
        (void)seed_given;
        if (budget > 0) scfg.vertex_budget = budget;
        if (n_cams > 0) scfg.n_cameras = n_cams;
        if (n_train > 0) scfg.n_train_poses = n_train;
        if (n_test >= 0) scfg.n_test_poses = n_test;
        if (image > 0) scfg.image_size = image;
        if (bone_perturb >= 0) scfg.bone_length_perturbation = bone_perturb;

        const GeneratedSubject subject = generate_subject(scfg);
        const Dataset ds = generate_dataset(subject, scfg);
        save_dataset(ds, synth_out);
        write_manifest(synth_out, "synth", nlohmann::json(scfg), argc, argv);
        std::cout << "dataset: " << ds.train.size() << " train / " << ds.test.size()
                  << " test frames, " << ds.cameras.size() << " cameras, V="
                  << ds.template_model.vertex_count() << "\n";
        return 0;
    }

    if (fitc->parsed()) {
        FitConfig cfg = desk ? FitConfig::desk_scale() : fit_flags;
        if (file_cfg.contains("fit")) {
            nlohmann::json merged = nlohmann::json(cfg);
            merged.update(file_cfg.at("fit"));
            cfg = merged.get<FitConfig>();
        }
        if (fit_seed_opt->count() > 0) cfg.seed = fit_seed;
        if (epochs >= 0) cfg.epochs = epochs;
        if (lr > 0) cfg.lr = lr;
        if (batch > 0) cfg.batch_size = batch;
        if (c_out > 0) cfg.c_out = c_out;
        if (threads > 0) cfg.threads = threads;
        cfg.use_pose = cfg.use_pose && !no_pose;
        cfg.use_depth = cfg.use_depth && !no_depth;
        cfg.use_penet = cfg.use_penet && !no_penet;
        cfg.use_laplacian = cfg.use_laplacian && !no_lap;
        cfg.enable_skel = cfg.enable_skel && !no_skel;
        cfg.enable_idvert = cfg.enable_idvert && !no_idvert;
        cfg.enable_posevert = cfg.enable_posevert && !no_posevert;

        const Dataset ds = load_dataset(fit_dataset);
        write_manifest(fit_out, "fit", nlohmann::json(cfg), argc, argv);
        if (!fit_resume.empty()) {
            FitState st = load_checkpoint(fit_resume, ds.template_model);
            st.config = cfg;
            std::ofstream csv(std::filesystem::path(fit_out) / "loss.csv");
            csv << "iter,pose,depth,penet_r,penet_nr,lap,total\n";
            fit_epochs(st, ds, ds.template_model, cfg.epochs, &csv);
            save_checkpoint(st, std::filesystem::path(fit_out) / "checkpoint.bin");
        } else {
            fit(ds, ds.template_model, cfg, std::filesystem::path(fit_out));
        }
        std::cout << "checkpoint: " << (std::filesystem::path(fit_out) / "checkpoint.bin") << "\n";
        return 0;
    }

    if (deform->parsed()) {
        const HandModel model = load_model(deform_model);
        FitState st = load_checkpoint(deform_ckpt, model);
        PoseVector pose{DofMask::from_model(model)};
        if (deform_pose != "zero") {
            std::ifstream in(deform_pose);
            if (!in) throw FormatError("cannot open pose file " + deform_pose);
            nlohmann::json j;
            in >> j;
            pose = PoseVector(DofMask::from_model(model), j.at("raw").get<std::vector<double>>());
        }
        const DeformedMesh mesh = deform_mesh(model, st.nets, st.beta, pose);
        const auto parent = std::filesystem::path(deform_out).parent_path();
        if (!parent.empty()) std::filesystem::create_directories(parent);
        save_obj(deform_out, mesh.vertices, mesh.faces);
        if (!deform_chains.empty()) {
            diff::Tape t;
            diff::Value theta = t.constant(Tensor::from({pose.raw().size()}, pose.theta()));
            RefinedModelNodes refined = apply_correctives(t, model, st.nets, st.beta, theta);
            diff::Value full =
                t.scatter_add(theta, DofMask::from_model(model).active_indices(),
                              {static_cast<std::size_t>(3 * model.joint_count())});
            FkNodes fk = forward_kinematics(t, full, refined.offsets, model.hierarchy);
            SphereChains chains = build_sphere_chains(t, refined, model.hierarchy);
            pose_sphere_chains(t, chains, fk);
            std::ofstream out(deform_chains);
            out << sphere_chains_json(t, chains).dump(1) << "\n";
        }
        write_manifest(std::filesystem::path(deform_out).parent_path(), "deform",
                       nlohmann::json{{"pose", deform_pose}}, argc, argv);
        std::cout << "mesh: " << deform_out << "\n";
        return 0;
    }

    if (render->parsed()) {
        Tensor verts;
        std::vector<std::array<int, 3>> faces;
        load_obj(render_mesh, verts, faces);
        const auto cams = load_cameras(render_cams);
        std::filesystem::create_directories(render_out);
        for (std::size_t c = 0; c < cams.size(); ++c) {
            const RasterResult r = rasterize_depth(verts, faces, cams[c]);
            write_pfm(std::filesystem::path(render_out) / ("view_" + std::to_string(c) + ".pfm"),
                      r.depth);
        }
        write_manifest(render_out, "render", nlohmann::json{{"mesh", render_mesh}}, argc, argv);
        std::cout << "rendered " << cams.size() << " views to " << render_out << "\n";
        return 0;
    }

    if (evalc->parsed()) {
        const Dataset ds = load_dataset(eval_dataset);
        FitState st = load_checkpoint(eval_ckpt, ds.template_model);
        FitConfig cfg = st.config;
        if (eval_iters > 0) cfg.eval_iterations = eval_iters;
        if (eval_threads > 0) cfg.threads = eval_threads;
        const EvalReport report =
            evaluate(ds, ds.template_model, st.nets, st.beta, cfg, std::filesystem::path(eval_out));
        write_manifest(eval_out, "eval", nlohmann::json(cfg), argc, argv);
        std::printf("P_err mean %.4f mm (p50 %.4f, p90 %.4f)\n", report.mean_p_err, report.p50_p_err,
                    report.p90_p_err);
        std::printf("M_err mean %.4f mm (p50 %.4f, p90 %.4f)\n", report.mean_m_err, report.p50_m_err,
                    report.p90_m_err);
        return 0;
    }

    if (grad->parsed()) {
        const auto rows = gradient_check_suite(grad_seed, grad_configs);
        bool all_pass = true;
        std::printf("%-16s %8s %8s %14s %10s  %s\n", "term", "configs", "coords", "max_rel_err",
                    "tolerance", "status");
        for (const auto& r : rows) {
            std::printf("%-16s %8d %8d %14.3e %10.1e  %s\n", r.term.c_str(), r.configs,
                        r.coords_checked, r.max_rel_err, r.tolerance, r.pass ? "PASS" : "FAIL");
            all_pass = all_pass && r.pass;
        }
        return all_pass ? 0 : 3;
    }

    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const handfit::TrainingError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const handfit::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
