#include "cellopt/config.hpp"
#include "cellopt/io.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

using namespace cellopt;
namespace fs = std::filesystem;

namespace {

struct CliResult {
    int code = -1;
    std::string out;
};

CliResult run_cli(const std::string& args) {
    const std::string cmd = std::string(CELLOPT_CLI_PATH) + " " + args + " 2>/dev/null";
    CliResult r;
    FILE* p = popen(cmd.c_str(), "r");
    if (!p) return r;
    char buf[4096];
    while (std::fgets(buf, sizeof buf, p)) r.out += buf;
    const int status = pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

fs::path scratch(const std::string& name) {
    fs::path d = fs::temp_directory_path() / ("cellopt_test_app_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

fs::path write_file(const fs::path& p, const std::string& text) {
    std::ofstream(p) << text;
    return p;
}

std::vector<std::string> lines_of(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    for (std::string l; std::getline(is, l);) out.push_back(l);
    return out;
}

} // namespace

TEST(Config, DefaultsValidate) { EXPECT_NO_THROW(RunConfig{}.validate()); }

TEST(Config, RoundTrip) {
    RunConfig c;
    c.geometry.refinements = 3;
    c.material.omega = 0.4;
    c.material.tau = 243.0;
    c.material.eps(0, 0) = Complex(2.25, 0.1);
    c.cost.target(0, 1) = c.cost.target(1, 0) = Complex(0.05, -0.002);
    c.cost.alpha = 1.0 / 3.0;
    c.schedule = parse_schedule("100:0.8, rest:0.1");
    c.has_schedule = true;
    c.optimizer.history_cap = 40;
    c.output.directory = "runs/a";
    c.deformation = "q.txt";
    c.gradient_check.seed = 17;

    const std::string text = write_config(c);
    const RunConfig d = parse_config(text);
    EXPECT_EQ(write_config(d), text);
    EXPECT_EQ(d.geometry.refinements, 3);
    EXPECT_EQ(d.material.omega, 0.4);
    EXPECT_EQ(d.material.eps(0, 0), Complex(2.25, 0.1));
    EXPECT_EQ(d.cost.target(1, 0), Complex(0.05, -0.002));
    EXPECT_EQ(d.cost.alpha, 1.0 / 3.0);
    ASSERT_EQ(d.schedule.stages.size(), 2u);
    EXPECT_EQ(*d.schedule.stages[0].steps, 100);
    EXPECT_FALSE(d.schedule.stages[1].steps);
    EXPECT_EQ(*d.optimizer.history_cap, 40u);
    EXPECT_EQ(d.deformation, "q.txt");
    EXPECT_EQ(d.gradient_check.seed, 17u);
}

TEST(Config, RejectsUnknownKeysAndSections) {
    EXPECT_THROW(parse_config("[geometry]\nradious = 0.3\n"), ConfigError);
    EXPECT_THROW(parse_config("[solver]\nx = 1\n"), ConfigError);
    EXPECT_THROW(parse_config("radius = 0.3\n"), ParseError);
    EXPECT_THROW(parse_config("[geometry]\nradius = 0.3x\n"), ParseError);
    EXPECT_THROW(parse_config("[geometry]\nradius = 0.3\nradius = 0.2\n"), ParseError);
    EXPECT_THROW(parse_config("[geometry]\nradius\n"), ParseError);
}

TEST(Config, RangeChecks) {
    EXPECT_THROW(parse_config("[geometry]\nradius = 0.6\n"), ConfigError);
    EXPECT_THROW(parse_config("[material]\nomega = 0\n"), ConfigError);
    EXPECT_THROW(parse_config("[cost]\nschedule = rest:0.8, 10:0.1\n"), ConfigError);
    EXPECT_THROW(parse_config("[optimizer]\narmijo_gamma = 0.7\n"), ConfigError);
}

TEST(Config, ComplexAndComments) {
    const auto c = parse_config("# comment\n[cost]\ntarget_xx = 0.25 , 0.005  ; trailing\ntarget_xy = 0.1\n");
    EXPECT_EQ(c.cost.target(0, 0), Complex(0.25, 0.005));
    EXPECT_EQ(c.cost.target(0, 1), Complex(0.1, 0.0));
}

TEST(Deformation, RoundTripAndChecks) {
    const Mesh mesh = generate_reference_mesh(0.3, 1);
    const FeSpace space(mesh);
    DeformationField q = zero_deformation(mesh);
    const auto bnd = boundary_vertices(mesh);
    for (int v = 0; v < mesh.num_vertices(); ++v)
        if (!bnd[v]) q.row(v) << 0.01 * std::sin(v), -0.02 * std::cos(v);
    std::stringstream ss;
    write_deformation(ss, q);
    const auto r = read_deformation(ss, mesh);
    EXPECT_EQ((r - q).norm(), 0.0);

    std::stringstream bad("deformation 1\nvertices 3\n0 0\n0 0\n0 0\n");
    EXPECT_THROW(read_deformation(bad, mesh), ValidationError);
    std::stringstream hdr("deform 1\n");
    EXPECT_THROW(read_deformation(hdr, mesh), ParseError);
}

TEST(Vtk, GoldenHeader) {
    const Mesh mesh = generate_reference_mesh(0.3, 0);
    const DeformationField q = zero_deformation(mesh);
    Matrix<Complex> chi = Matrix<Complex>::Zero(mesh.num_vertices(), 2);
    std::ostringstream os;
    write_vtk(os, mesh, {&q, &chi, std::vector<double>(mesh.num_cells(), 1.0)}, "cellopt test");
    const auto l = lines_of(os.str());
    const int nv = mesh.num_vertices(), nc = mesh.num_cells();
    ASSERT_GT(l.size(), 10u);
    EXPECT_EQ(l[0], "# vtk DataFile Version 3.0");
    EXPECT_EQ(l[1], "cellopt test");
    EXPECT_EQ(l[2], "ASCII");
    EXPECT_EQ(l[3], "DATASET UNSTRUCTURED_GRID");
    EXPECT_EQ(l[4], "POINTS " + std::to_string(nv) + " double");
    EXPECT_EQ(l[5 + nv], "CELLS 13 65");
    EXPECT_EQ(l[6 + nv + nc], "CELL_TYPES 13");
    for (int c = 0; c < nc; ++c) EXPECT_EQ(l[7 + nv + nc + c], "9");
    EXPECT_EQ(l[7 + nv + 2 * nc], "POINT_DATA " + std::to_string(nv));
    EXPECT_EQ(l[8 + nv + 2 * nc], "VECTORS deformation double");
    EXPECT_EQ(l[9 + 2 * nv + 2 * nc], "SCALARS chi1_re double 1");
    EXPECT_EQ(l[10 + 2 * nv + 2 * nc], "LOOKUP_TABLE default");
    const std::size_t cell_data = 9 + 2 * nv + 2 * nc + 4 * (nv + 2);
    EXPECT_EQ(l[cell_data], "CELL_DATA 13");
    EXPECT_EQ(l[cell_data + 1], "SCALARS min_J double 1");
    EXPECT_EQ(l.size(), cell_data + 3 + nc);
}

TEST(Vtk, PointsAreDeformed) {
    const Mesh mesh = generate_reference_mesh(0.3, 1);
    DeformationField q = zero_deformation(mesh);
    const auto bnd = boundary_vertices(mesh);
    int v0 = 0;
    while (bnd[v0]) ++v0;
    q.row(v0) << 0.01, -0.02;
    std::ostringstream os;
    write_vtk(os, mesh, {&q, nullptr, {}}, "t");
    const auto l = lines_of(os.str());
    std::istringstream p(l[5 + v0]);
    double x, y, z;
    p >> x >> y >> z;
    EXPECT_DOUBLE_EQ(x, mesh.vertices[v0].x() + 0.01);
    EXPECT_DOUBLE_EQ(y, mesh.vertices[v0].y() - 0.02);
    EXPECT_EQ(z, 0.0);
}

TEST(Csv, RowMatchesHeader) {
    IterationRecord r;
    r.step = 7;
    r.beta = 0.8;
    std::ostringstream os;
    write_csv_row(os, r);
    const auto count = [](const std::string& s) { return std::count(s.begin(), s.end(), ','); };
    EXPECT_EQ(count(os.str()), count(csv_header()));
    EXPECT_EQ(os.str().substr(0, 4), "7,0,");
}

TEST(Cli, MeshCellCounts) {
    const auto dir = scratch("mesh");
    const auto cfg = write_file(dir / "c.ini", "[geometry]\nrefinements = 5\n");
    const auto r = run_cli("mesh --config " + cfg.string() + " --out " + dir.string());
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("cells: 13312"), std::string::npos) << r.out;
    EXPECT_TRUE(fs::exists(dir / "mesh.txt"));
    const Mesh m = load_mesh((dir / "mesh.txt").string());
    EXPECT_EQ(m.num_cells(), 13312);
}

TEST(Cli, ConfigErrorExitCode) {
    const auto dir = scratch("bad");
    const auto cfg = write_file(dir / "c.ini", "[geometry]\nradius = 0.6\n");
    EXPECT_EQ(run_cli("mesh --config " + cfg.string() + " --out " + dir.string()).code, 2);
    const auto cfg2 = write_file(dir / "d.ini", "[geometry]\nnope = 1\n");
    EXPECT_EQ(run_cli("solve-cell --config " + cfg2.string()).code, 2);
    EXPECT_EQ(run_cli("mesh --config " + (dir / "missing.ini").string()).code, 2);
    EXPECT_EQ(run_cli("frobnicate").code, 2);
}

TEST(Cli, SolveCellReferenceAndDegenerate) {
    const auto dir = scratch("solve");
    const auto cfg = write_file(dir / "c.ini", "[geometry]\nrefinements = 2\n[material]\nomega_p = 0\n");
    auto r = run_cli("solve-cell --config " + cfg.string() + " --out " + (dir / "ok").string());
    ASSERT_EQ(r.code, 0);
    std::ifstream rep(dir / "ok" / "report.json");
    const Json j = Json::parse(rep);
    EXPECT_NEAR(j["effective_tensor"]["xx"]["re"].get<double>(), 1.0, 1e-12);
    EXPECT_NEAR(j["effective_tensor"]["xy"]["re"].get<double>(), 0.0, 1e-12);
    EXPECT_TRUE(fs::exists(dir / "ok" / "corrector.vtk"));

    // Fold one interior vertex over its neighbours.
    const Mesh mesh = generate_reference_mesh(0.3, 2);
    DeformationField q = zero_deformation(mesh);
    const auto bnd = boundary_vertices(mesh);
    int v0 = 0;
    while (bnd[v0]) ++v0;
    q.row(v0) << 0.3, 0.3;
    save_deformation(q, (dir / "q.txt").string());
    const auto cfg2 = write_file(dir / "d.ini", "[geometry]\nrefinements = 2\n[input]\ndeformation = " +
                                                    (dir / "q.txt").string() + "\n");
    r = run_cli("solve-cell --config " + cfg2.string() + " --out " + (dir / "bad").string());
    EXPECT_EQ(r.code, 3);
    EXPECT_NE(r.out.find("degenerate_deformation"), std::string::npos);
}

TEST(Cli, OptimizeZeroStepsEchoesInitialState) {
    const auto dir = scratch("opt0");
    const auto cfg =
        write_file(dir / "c.ini", "[geometry]\nrefinements = 1\n[optimizer]\nmax_steps = 0\ntolerance = 1\n");
    const auto r = run_cli("optimize --fixed-order --config " + cfg.string() + " --out " + dir.string());
    ASSERT_EQ(r.code, 0) << r.out;
    std::ifstream rep(dir / "report.json");
    const Json j = Json::parse(rep);
    EXPECT_EQ(j["steps"].get<int>(), 0);
    EXPECT_EQ(j["records"].size(), 1u);
    EXPECT_EQ(j["initial_deviation_percent"], j["final_deviation_percent"]);
    EXPECT_EQ(j["mesh_hash"].get<std::string>().size(), 16u);
    EXPECT_TRUE(fs::exists(dir / "config.ini"));
    EXPECT_TRUE(fs::exists(dir / "q_final.txt"));
    EXPECT_TRUE(fs::exists(dir / "step_00000.vtk"));
    EXPECT_NO_THROW(load_config((dir / "config.ini").string()));
}

TEST(Cli, OptimizeLogsStageSwitchAndIsDeterministic) {
    const std::string text = "[geometry]\nrefinements = 1\n[cost]\nschedule = 2:0.8, rest:0.1\n"
                             "[optimizer]\nmax_steps = 4\n[output]\nvtk_every = 0\n";
    std::string logs[2];
    for (int i = 0; i < 2; ++i) {
        const auto dir = scratch("stage" + std::to_string(i));
        const auto cfg = write_file(dir / "c.ini", text);
        const auto r = run_cli("optimize --fixed-order --config " + cfg.string() + " --out " + dir.string());
        ASSERT_EQ(r.code, 0) << r.out;
        std::ifstream log(dir / "log.csv");
        std::stringstream ss;
        ss << log.rdbuf();
        logs[i] = ss.str();
    }
    EXPECT_EQ(logs[0], logs[1]);
    const auto l = lines_of(logs[0]);
    ASSERT_GE(l.size(), 5u);
    EXPECT_EQ(l[0], csv_header());
    EXPECT_EQ(l[1].substr(0, 4), "0,0,");
    bool switched = false;
    for (const auto& row : l)
        if (row.rfind("2,1,0.10000000000000001,", 0) == 0) switched = true;
    EXPECT_TRUE(switched) << logs[0];
}

TEST(Cli, GradientCheckWritesTable) {
    const auto dir = scratch("gc");
    const auto cfg = write_file(dir / "c.ini", "[geometry]\nrefinements = 1\n[gradient_check]\ndirections = 3\n");
    const auto r = run_cli("gradient-check --seed 5 --config " + cfg.string() + " --out " + dir.string());
    ASSERT_EQ(r.code, 0);
    std::ifstream f(dir / "gradient_check.json");
    const Json j = Json::parse(f);
    EXPECT_EQ(j["seed"].get<unsigned>(), 5u);
    ASSERT_EQ(j["directions"].size(), 3u);
    EXPECT_EQ(j["directions"][0]["sweep"].size(), 8u);
    EXPECT_LT(j["worst_best_error"].get<double>(), 1e-4);
}
