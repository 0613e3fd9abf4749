/*
 * Reference spectrum-sensing dApp.
 *
 * One source, two builds:
 *   clang --target=wasm32 -nostdlib ...      sandboxed module, host calls are imports
 *   cc -DNATIVE_BUILD native_shim.c ...      shared library, host calls go through the shim
 *
 * Freestanding: no libc, no libm. Trig and exp are computed here so both
 * builds execute the same f64 operation sequence (compile with
 * -ffp-contract=off) and emit bit-identical control payloads.
 */
#include <stdint.h>

#ifdef NATIVE_BUILD
#define HOSTFN(name)
#define EXPORT(name) __attribute__((visibility("default")))
#else
#define HOSTFN(name) __attribute__((import_module("env"), import_name(#name)))
#define EXPORT(name) __attribute__((export_name(#name)))
#endif

HOSTFN(sock_connect) int32_t sock_connect(const char *host, int32_t host_len, int32_t port);
HOSTFN(sock_bind) int32_t sock_bind(int32_t port);
HOSTFN(sock_accept) int32_t sock_accept(int32_t listen_fd);
HOSTFN(sock_read) int32_t sock_read(int32_t fd, void *buf, int32_t len);
HOSTFN(sock_write) int32_t sock_write(int32_t fd, const void *buf, int32_t len);
HOSTFN(sock_close) int32_t sock_close(int32_t fd);
HOSTFN(clock_us) uint64_t clock_us(void);

#define MAX_FFT 4096
#define MAX_PRB 4096
#define HDR 7
#define IND_FIXED 21
#define RX_CAP (IND_FIXED + 8 * MAX_FFT)
#define MAX_LOG 16384
#define LOG_FIELDS 7

#define MSG_SETUP_REQ 0x01
#define MSG_SETUP_RESP 0x02
#define MSG_SUB_REQ 0x03
#define MSG_SUB_RESP 0x04
#define MSG_INDICATION 0x05
#define MSG_CONTROL 0x06
#define MSG_ERROR 0x07

#define SERVICE_REPORT 1
#define SERVICES_MASK 0x05 /* report | control */

#define EXIT_OK 0
#define EXIT_PROTOCOL 1
#define EXIT_REJECTED 2
#define EXIT_CONNECT 3
#define EXIT_CONFIG 4

static char cfg_buf[1024];
static uint8_t rx[RX_CAP];
static uint8_t tx[HDR + 11 + MAX_PRB / 8];
static double re[MAX_FFT], im[MAX_FFT];
static double tw_re[MAX_FFT / 2], tw_im[MAX_FFT / 2];
static double energy[MAX_PRB], scratch[MAX_PRB];
static uint32_t stage_log[MAX_LOG * LOG_FIELDS];
static uint32_t stage_count, decode_errors, controls_sent;

static struct {
    uint32_t dapp_id;
    char host[256];
    int32_t host_len;
    uint32_t port;
    uint32_t listen_port;
    uint32_t fft_size;
    uint32_t n_prb;
    double threshold_db;
    uint32_t period_us;
    uint32_t timing;
} cfg;

/* ---- byte order ------------------------------------------------------- */

static uint32_t get_be32(const uint8_t *p) {
    return ((uint32_t)p[0] << 24) | ((uint32_t)p[1] << 16) | ((uint32_t)p[2] << 8) | p[3];
}

static void put_be32(uint8_t *p, uint32_t v) {
    p[0] = (uint8_t)(v >> 24);
    p[1] = (uint8_t)(v >> 16);
    p[2] = (uint8_t)(v >> 8);
    p[3] = (uint8_t)v;
}

static void put_be16(uint8_t *p, uint16_t v) {
    p[0] = (uint8_t)(v >> 8);
    p[1] = (uint8_t)v;
}

static float f32_from_bits(uint32_t bits) {
    union { uint32_t u; float f; } cv;
    cv.u = bits;
    return cv.f;
}

/* ---- config parsing --------------------------------------------------- */

static int is_key(const char *s, int len, const char *key) {
    int i = 0;
    for (; i < len && key[i]; i++)
        if (s[i] != key[i]) return 0;
    return i == len && key[i] == 0;
}

static uint32_t parse_u32(const char *s, int len) {
    uint32_t v = 0;
    for (int i = 0; i < len && s[i] >= '0' && s[i] <= '9'; i++) v = v * 10 + (uint32_t)(s[i] - '0');
    return v;
}

static double parse_f64(const char *s, int len) {
    int i = 0, neg = 0, exp10 = 0;
    double mant = 0.0;
    if (i < len && (s[i] == '-' || s[i] == '+')) neg = s[i++] == '-';
    for (; i < len && s[i] >= '0' && s[i] <= '9'; i++) mant = mant * 10.0 + (s[i] - '0');
    if (i < len && s[i] == '.') {
        for (i++; i < len && s[i] >= '0' && s[i] <= '9'; i++) {
            mant = mant * 10.0 + (s[i] - '0');
            exp10--;
        }
    }
    if (i < len && (s[i] == 'e' || s[i] == 'E')) {
        int eneg = 0, e = 0;
        i++;
        if (i < len && (s[i] == '-' || s[i] == '+')) eneg = s[i++] == '-';
        for (; i < len && s[i] >= '0' && s[i] <= '9'; i++) e = e * 10 + (s[i] - '0');
        exp10 += eneg ? -e : e;
    }
    for (; exp10 > 0; exp10--) mant *= 10.0;
    for (; exp10 < 0; exp10++) mant /= 10.0;
    return neg ? -mant : mant;
}

static void parse_config(int32_t len) {
    cfg.dapp_id = 1;
    cfg.host_len = 0;
    cfg.port = 0;
    cfg.listen_port = 0;
    cfg.fft_size = 1024;
    cfg.n_prb = 64;
    cfg.threshold_db = 6.0;
    cfg.period_us = 1000;
    cfg.timing = 1;
    if (len > (int32_t)sizeof cfg_buf) len = sizeof cfg_buf;
    int pos = 0;
    while (pos < len) {
        int end = pos;
        while (end < len && cfg_buf[end] != '\n') end++;
        int eq = pos;
        while (eq < end && cfg_buf[eq] != '=') eq++;
        if (eq < end) {
            const char *k = cfg_buf + pos, *v = cfg_buf + eq + 1;
            int kl = eq - pos, vl = end - eq - 1;
            if (is_key(k, kl, "dapp_id")) cfg.dapp_id = parse_u32(v, vl);
            else if (is_key(k, kl, "agent_host") && vl < (int)sizeof cfg.host) {
                for (int i = 0; i < vl; i++) cfg.host[i] = v[i];
                cfg.host_len = vl;
            } else if (is_key(k, kl, "agent_port")) cfg.port = parse_u32(v, vl);
            else if (is_key(k, kl, "listen_port")) cfg.listen_port = parse_u32(v, vl);
            else if (is_key(k, kl, "fft_size")) cfg.fft_size = parse_u32(v, vl);
            else if (is_key(k, kl, "n_prb")) cfg.n_prb = parse_u32(v, vl);
            else if (is_key(k, kl, "threshold_db")) cfg.threshold_db = parse_f64(v, vl);
            else if (is_key(k, kl, "period_us")) cfg.period_us = parse_u32(v, vl);
            else if (is_key(k, kl, "timing")) cfg.timing = parse_u32(v, vl);
        }
        pos = end + 1;
    }
}

static int config_ok(void) {
    uint32_t n = cfg.fft_size;
    if (n == 0 || n > MAX_FFT || (n & (n - 1))) return 0;
    if (cfg.n_prb == 0 || cfg.n_prb > MAX_PRB || n % cfg.n_prb) return 0;
    if (!(cfg.threshold_db > 0.0)) return 0;
    return cfg.host_len > 0 || cfg.listen_port != 0;
}

/* client mode dials the agent; server mode waits for the agent to dial in */
static int32_t open_agent_connection(void) {
    if (cfg.listen_port == 0) return sock_connect(cfg.host, cfg.host_len, (int32_t)cfg.port);
    int32_t lfd = sock_bind((int32_t)cfg.listen_port);
    if (lfd < 0) return lfd;
    int32_t fd = sock_accept(lfd);
    sock_close(lfd);
    return fd;
}

/* ---- math -------------------------------------------------------------- */

static const double PI = 3.14159265358979323846;
static const double LN2 = 0.69314718055994530942;
static const double LN10 = 2.30258509299404568402;

/* Horner-form Taylor series, accurate to ~1e-17 on [-pi/4, pi/4] */
static double kernel_sin(double x) {
    double x2 = x * x;
    return x * (1 - x2 / 6 * (1 - x2 / 20 * (1 - x2 / 42 * (1 - x2 / 72 * (1 - x2 / 110 *
           (1 - x2 / 156 * (1 - x2 / 210 * (1 - x2 / 272))))))));
}

static double kernel_cos(double x) {
    double x2 = x * x;
    return 1 - x2 / 2 * (1 - x2 / 12 * (1 - x2 / 30 * (1 - x2 / 56 * (1 - x2 / 90 *
           (1 - x2 / 132 * (1 - x2 / 182 * (1 - x2 / 240)))))));
}

/* cos and sin of 2*pi*k/n for 0 <= k < n/2, reduced by octant on the integer k */
static void unit_root(uint32_t k, uint32_t n, double *c, double *s) {
    double scale = 2.0 * PI / (double)n;
    if (8 * k <= n) {
        double a = scale * (double)k;
        *c = kernel_cos(a);
        *s = kernel_sin(a);
    } else if (4 * k <= n) {
        double a = scale * (double)(n / 4.0 - k);
        *c = kernel_sin(a);
        *s = kernel_cos(a);
    } else if (8 * k <= 3 * n) {
        double a = scale * (double)(k - n / 4.0);
        *c = -kernel_sin(a);
        *s = kernel_cos(a);
    } else {
        double a = scale * (double)(n / 2.0 - k);
        *c = -kernel_cos(a);
        *s = kernel_sin(a);
    }
}

static double exp_f64(double x) {
    double kf = x / LN2;
    int k = (int)(kf + (kf >= 0 ? 0.5 : -0.5));
    double r = x - (double)k * LN2;
    double term = 1.0, sum = 1.0;
    for (int i = 1; i < 24; i++) {
        term = term * r / (double)i;
        sum += term;
    }
    for (; k > 0; k--) sum *= 2.0;
    for (; k < 0; k++) sum *= 0.5;
    return sum;
}

static void init_twiddles(uint32_t n) {
    for (uint32_t k = 0; k < n / 2; k++) {
        double c, s;
        unit_root(k, n, &c, &s);
        tw_re[k] = c;
        tw_im[k] = -s;
    }
}

static void fft_inplace(uint32_t n) {
    for (uint32_t i = 1, j = 0; i < n; i++) {
        uint32_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) {
            double t = re[i]; re[i] = re[j]; re[j] = t;
            t = im[i]; im[i] = im[j]; im[j] = t;
        }
    }
    for (uint32_t h = 1; h < n; h <<= 1) {
        uint32_t step = n / (2 * h);
        for (uint32_t b = 0; b < n; b += 2 * h) {
            for (uint32_t j = 0; j < h; j++) {
                double wr = tw_re[j * step], wi = tw_im[j * step];
                uint32_t p = b + j, q = p + h;
                double tr = wr * re[q] - wi * im[q];
                double ti = wr * im[q] + wi * re[q];
                re[q] = re[p] - tr;
                im[q] = im[p] - ti;
                re[p] = re[p] + tr;
                im[p] = im[p] + ti;
            }
        }
    }
}

static double median(const double *v, uint32_t n) {
    for (uint32_t i = 0; i < n; i++) {
        double x = v[i];
        uint32_t j = i;
        for (; j > 0 && scratch[j - 1] > x; j--) scratch[j] = scratch[j - 1];
        scratch[j] = x;
    }
    if (n & 1) return scratch[n / 2];
    return (scratch[n / 2 - 1] + scratch[n / 2]) * 0.5;
}

#define NUMERIC_FLOOR 1e-12

/* FFT -> mean |X|^2 per PRB -> median floor -> threshold; writes the bitmap */
static void sense(uint8_t *bitmap) {
    uint32_t n = cfg.fft_size, n_prb = cfg.n_prb, width = n / n_prb;
    fft_inplace(n);
    for (uint32_t p = 0; p < n_prb; p++) {
        double acc = 0.0;
        for (uint32_t k = p * width; k < (p + 1) * width; k++) acc += re[k] * re[k] + im[k] * im[k];
        energy[p] = acc / (double)width;
    }
    double peak = 0.0;
    for (uint32_t p = 0; p < n_prb; p++)
        if (energy[p] > peak) peak = energy[p];
    /* floor never below rounding leakage of the f32 wire samples */
    double floor = median(energy, n_prb);
    if (floor < peak * NUMERIC_FLOOR) floor = peak * NUMERIC_FLOOR;
    double limit = floor * exp_f64(cfg.threshold_db / 10.0 * LN10);
    for (uint32_t i = 0; i < (n_prb + 7) / 8; i++) bitmap[i] = 0;
    for (uint32_t p = 0; p < n_prb; p++)
        if (energy[p] > limit) bitmap[p / 8] |= (uint8_t)(1u << (p % 8));
}

/* ---- transport ------------------------------------------------------------ */

static int read_exact(int32_t fd, uint8_t *buf, uint32_t n) {
    uint32_t got = 0;
    while (got < n) {
        int32_t r = sock_read(fd, buf + got, (int32_t)(n - got));
        if (r <= 0) return -1;
        got += (uint32_t)r;
    }
    return 0;
}

static int write_all(int32_t fd, const uint8_t *buf, uint32_t n) {
    uint32_t sent = 0;
    while (sent < n) {
        int32_t w = sock_write(fd, buf + sent, (int32_t)(n - sent));
        if (w <= 0) return -1;
        sent += (uint32_t)w;
    }
    return 0;
}

/* returns msg_type, or -1 on EOF/bad header; oversize payloads are drained and flagged with *len = -1 */
static int recv_frame(int32_t fd, int32_t *len) {
    uint8_t hdr[HDR];
    if (read_exact(fd, hdr, HDR)) return -1;
    if (hdr[0] != 0xE3 || hdr[1] != 0x01) return -1;
    uint32_t n = get_be32(hdr + 3);
    if (n > RX_CAP) {
        while (n) {
            uint32_t chunk = n > RX_CAP ? RX_CAP : n;
            if (read_exact(fd, rx, chunk)) return -1;
            n -= chunk;
        }
        *len = -1;
        return hdr[2];
    }
    if (read_exact(fd, rx, n)) return -1;
    *len = (int32_t)n;
    return hdr[2];
}

static void frame_header(uint8_t *p, uint8_t type, uint32_t len) {
    p[0] = 0xE3;
    p[1] = 0x01;
    p[2] = type;
    put_be32(p + 3, len);
}

static uint64_t now(void) { return cfg.timing ? clock_us() : 0; }

/* ---- entry points --------------------------------------------------------- */

EXPORT(dapp_config_buf) char *dapp_config_buf(void) { return cfg_buf; }
EXPORT(dapp_config_cap) uint32_t dapp_config_cap(void) { return sizeof cfg_buf; }
EXPORT(dapp_stage_log) uint32_t *dapp_stage_log(void) { return stage_log; }
EXPORT(dapp_stage_count) uint32_t dapp_stage_count(void) { return stage_count; }
EXPORT(dapp_decode_errors) uint32_t dapp_decode_errors(void) { return decode_errors; }
EXPORT(dapp_controls_sent) uint32_t dapp_controls_sent(void) { return controls_sent; }

EXPORT(dapp_run) int32_t dapp_run(int32_t cfg_len) {
    stage_count = decode_errors = controls_sent = 0;
    parse_config(cfg_len);
    if (!config_ok()) return EXIT_CONFIG;
    init_twiddles(cfg.fft_size);

    int32_t fd = open_agent_connection();
    if (fd < 0) return EXIT_CONNECT;

    uint8_t msg[HDR + 9];
    int32_t len;
    frame_header(msg, MSG_SETUP_REQ, 5);
    put_be32(msg + HDR, cfg.dapp_id);
    msg[HDR + 4] = SERVICES_MASK;
    if (write_all(fd, msg, HDR + 5)) goto protocol_error;
    int type = recv_frame(fd, &len);
    if (type != MSG_SETUP_RESP || len != 5) goto protocol_error;
    if (rx[4] != 0) {
        sock_close(fd);
        return EXIT_REJECTED;
    }

    frame_header(msg, MSG_SUB_REQ, 9);
    put_be32(msg + HDR, cfg.dapp_id);
    msg[HDR + 4] = SERVICE_REPORT;
    put_be32(msg + HDR + 5, cfg.period_us);
    if (write_all(fd, msg, HDR + 9)) goto protocol_error;
    type = recv_frame(fd, &len);
    if (type == MSG_ERROR || (type == MSG_SUB_RESP && len == 5 && rx[4] != 0)) {
        sock_close(fd);
        return EXIT_REJECTED;
    }
    if (type != MSG_SUB_RESP || len != 5) goto protocol_error;

    uint32_t n = cfg.fft_size, bitmap_len = (cfg.n_prb + 7) / 8;
    uint32_t ctrl_len = 11 + bitmap_len;
    for (;;) {
        uint64_t t_loop = now();
        type = recv_frame(fd, &len);
        if (type < 0) break;
        uint64_t t0 = now();
        if (type != MSG_INDICATION) continue;
        /* decode */
        if (len < IND_FIXED || rx[16] != 1 || get_be32(rx + 17) != n ||
            (uint32_t)len != IND_FIXED + 8 * n) {
            decode_errors++;
            continue;
        }
        uint32_t seq = get_be32(rx + 4);
        const uint8_t *s = rx + IND_FIXED;
        for (uint32_t i = 0; i < n; i++, s += 8) {
            re[i] = (double)f32_from_bits(get_be32(s));
            im[i] = (double)f32_from_bits(get_be32(s + 4));
        }
        uint64_t t1 = now();
        /* process */
        uint8_t *bitmap = tx + HDR + 11;
        sense(bitmap);
        uint64_t t2 = now();
        /* encode */
        frame_header(tx, MSG_CONTROL, ctrl_len);
        put_be32(tx + HDR, cfg.dapp_id);
        put_be32(tx + HDR + 4, seq);
        tx[HDR + 8] = 1;
        put_be16(tx + HDR + 9, (uint16_t)cfg.n_prb);
        uint64_t t3 = now();
        /* transmit */
        if (write_all(fd, tx, HDR + ctrl_len)) break;
        uint64_t t4 = now();
        controls_sent++;
        if (cfg.timing && stage_count < MAX_LOG) {
            uint32_t *rec = stage_log + stage_count * LOG_FIELDS;
            rec[0] = seq;
            rec[1] = (uint32_t)(t1 - t0);
            rec[2] = (uint32_t)(t2 - t1);
            rec[3] = (uint32_t)(t3 - t2);
            rec[4] = (uint32_t)(t4 - t3);
            rec[5] = (uint32_t)(t4 - t0);
            rec[6] = (uint32_t)(t4 - t_loop);
            stage_count++;
        }
    }
    sock_close(fd);
    return EXIT_OK;

protocol_error:
    sock_close(fd);
    return EXIT_PROTOCOL;
}
