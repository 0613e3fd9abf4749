/* Host-call shim for the native build: socket calls are forwarded to a table
 * installed by the embedding process; the clock is read directly. */
#define _POSIX_C_SOURCE 199309L
#include <stdint.h>
#include <time.h>

struct dapp_host {
    int32_t (*sock_connect)(const char *host, int32_t host_len, int32_t port);
    int32_t (*sock_bind)(int32_t port);
    int32_t (*sock_accept)(int32_t listen_fd);
    int32_t (*sock_read)(int32_t fd, void *buf, int32_t len);
    int32_t (*sock_write)(int32_t fd, const void *buf, int32_t len);
    int32_t (*sock_close)(int32_t fd);
};

static struct dapp_host host;

__attribute__((visibility("default"))) void dapp_set_host(const struct dapp_host *h) { host = *h; }

int32_t sock_connect(const char *h, int32_t n, int32_t port) { return host.sock_connect(h, n, port); }
int32_t sock_bind(int32_t port) { return host.sock_bind(port); }
int32_t sock_accept(int32_t fd) { return host.sock_accept(fd); }
int32_t sock_read(int32_t fd, void *buf, int32_t len) { return host.sock_read(fd, buf, len); }
int32_t sock_write(int32_t fd, const void *buf, int32_t len) { return host.sock_write(fd, buf, len); }
int32_t sock_close(int32_t fd) { return host.sock_close(fd); }

uint64_t clock_us(void) {
    struct timespec ts;
    clock_gettime(CLOCK_MONOTONIC, &ts);
    return (uint64_t)ts.tv_sec * 1000000u + (uint64_t)ts.tv_nsec / 1000u;
}
